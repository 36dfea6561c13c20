"""Multi-glimpse bilinear attention fusion of region features and question
token states, and the answer classifier on top of it.

Each glimpse computes a low-rank bilinear attention map over all
(region, token) pairs, normalized jointly over the whole map, pools a joint
vector under that map and adds its projection to a running residual sum.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigurationError, DimensionError
from .language import BertEncoder, EncoderConfig, GruConfig, GruQuestionEncoder, QuestionEncoding, TokenSequence
from .numerics import Module, Tensor, init_rng, ops
from .numerics.nn import Linear, normal_param

RESIDUAL_INITS = ("zeros", "first_join")


@dataclass
class BanConfig:
    glimpses: int = 8
    joint_dim: int = 1024
    visual_dim: int = 2048
    question_dim: int = 768
    num_answers: int = 3129
    classifier_hidden: int | None = None
    residual_init: str = "zeros"
    init_std: float | None = None
    seed: int = 0

    def __post_init__(self):
        if min(self.glimpses, self.joint_dim, self.visual_dim, self.question_dim, self.num_answers) < 1:
            raise ConfigurationError("BAN glimpses and dimensions must be >= 1")
        if self.residual_init not in RESIDUAL_INITS:
            raise ConfigurationError(f"residual_init must be one of {RESIDUAL_INITS}")
        if self.classifier_hidden is None:
            self.classifier_hidden = 2 * self.joint_dim

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def _std(fan_in: int, override: float | None) -> float:
    return override if override is not None else float(np.sqrt(1.0 / fan_in))


class BanFusion(Module):
    def __init__(self, config: BanConfig, dtype=None):
        self.config = config
        c, s = config, config.seed
        self.att_v = Linear(c.visual_dim, c.joint_dim, init_rng(s, "ban.att_v"), _std(c.visual_dim, c.init_std),
                            dtype=dtype)
        self.att_q = Linear(c.question_dim, c.joint_dim, init_rng(s, "ban.att_q"),
                            _std(c.question_dim, c.init_std), dtype=dtype)
        self.att_p = normal_param(init_rng(s, "ban.att_p"), (c.glimpses, c.joint_dim), _std(c.joint_dim, c.init_std),
                                  dtype)
        self.join_v = [Linear(c.visual_dim, c.joint_dim, init_rng(s, f"ban.join{g}.v"),
                              _std(c.visual_dim, c.init_std), dtype=dtype) for g in range(c.glimpses)]
        self.join_q = [Linear(c.question_dim, c.joint_dim, init_rng(s, f"ban.join{g}.q"),
                              _std(c.question_dim, c.init_std), dtype=dtype) for g in range(c.glimpses)]
        self.proj = [Linear(c.joint_dim, c.joint_dim, init_rng(s, f"ban.proj{g}"), _std(c.joint_dim, c.init_std),
                            dtype=dtype) for g in range(c.glimpses)]
        self.cls_fc1 = Linear(c.joint_dim, c.classifier_hidden, init_rng(s, "ban.cls1"),
                              _std(c.joint_dim, c.init_std), dtype=dtype)
        self.cls_fc2 = Linear(c.classifier_hidden, c.num_answers, init_rng(s, "ban.cls2"),
                              _std(c.classifier_hidden, c.init_std), dtype=dtype)


def _check_inputs(v: Tensor, q: Tensor, cfg: BanConfig, q_mask) -> np.ndarray:
    if v.ndim != 2 or v.shape[1] != cfg.visual_dim or v.shape[0] < 1:
        raise DimensionError(f"region features {v.shape} do not match visual_dim {cfg.visual_dim}")
    if q.ndim != 2 or q.shape[1] != cfg.question_dim or q.shape[0] < 1:
        raise DimensionError(f"question states {q.shape} do not match question_dim {cfg.question_dim}")
    keep = np.ones(q.shape[0], bool) if q_mask is None else np.asarray(q_mask, bool)
    if keep.shape != (q.shape[0],):
        raise DimensionError(f"question mask {keep.shape} for {q.shape[0]} tokens")
    if not keep.any():
        raise ValueError("every question token is masked")
    return keep


def _attention_from_projections(v_: Tensor, q_: Tensor, p_g: Tensor, keep: np.ndarray) -> Tensor:
    logits = ops.matmul(ops.mul(v_, p_g), ops.transpose(q_))
    if not keep.all():
        logits = ops.masked_fill(logits, ~keep[None, :], -np.inf)
    return ops.softmax(logits, axis=None)


def attention_maps(v: Tensor, q: Tensor, model: BanFusion, q_mask=None) -> list[Tensor]:
    """All glimpse maps (``N x T`` each) from the shared rank-space projections."""
    keep = _check_inputs(v, q, model.config, q_mask)
    v_ = ops.relu(model.att_v(v))
    q_ = ops.relu(model.att_q(q))
    return [_attention_from_projections(v_, q_, model.att_p[g], keep) for g in range(model.config.glimpses)]


def bilinear_attention_map(v: Tensor, q: Tensor, glimpse: int, model: BanFusion, q_mask=None) -> Tensor:
    """Softmax over all ``N*T`` entries of ``relu(V U) diag(p_g) relu(Q W)^T``."""
    if not 0 <= glimpse < model.config.glimpses:
        raise IndexError(f"glimpse {glimpse} out of range for {model.config.glimpses} glimpses")
    keep = _check_inputs(v, q, model.config, q_mask)
    v_ = ops.relu(model.att_v(v))
    q_ = ops.relu(model.att_q(q))
    return _attention_from_projections(v_, q_, model.att_p[glimpse], keep)


def glimpse_join(v: Tensor, q: Tensor, attention: Tensor, glimpse: int, model: BanFusion) -> Tensor:
    """Joint vector with channel ``k`` equal to ``sum_ij v'_ik A_ij q'_jk``."""
    if attention.shape != (v.shape[0], q.shape[0]):
        raise DimensionError(f"attention {attention.shape} does not match {v.shape[0]} regions x {q.shape[0]} tokens")
    v_ = ops.relu(model.join_v[glimpse](v))
    q_ = ops.relu(model.join_q[glimpse](q))
    return ops.sum(ops.mul(ops.matmul(ops.transpose(attention), v_), q_), axis=0)


def ban_forward(v: Tensor, q: Tensor, model: BanFusion, q_mask=None) -> tuple[Tensor, list[Tensor]]:
    """Residual sum of projected glimpse joins; also returns the attention maps."""
    maps = attention_maps(v, q, model, q_mask)
    d = model.config.joint_dim
    fused = None
    if model.config.residual_init == "first_join":
        fused = glimpse_join(v, q, maps[0], 0, model)
    for g, a in enumerate(maps):
        joint = glimpse_join(v, q, a, g, model)
        step = ops.reshape(model.proj[g](ops.reshape(joint, (1, d))), (d,))
        fused = step if fused is None else ops.add(fused, step)
    return fused, maps


def answer_logits(fused: Tensor, model: BanFusion) -> Tensor:
    """Two-layer classifier head (FC -> ReLU -> FC) producing one logit per answer."""
    d = model.config.joint_dim
    if fused.shape != (d,):
        raise DimensionError(f"fused vector {fused.shape} does not match joint_dim {d}")
    h = ops.relu(model.cls_fc1(ops.reshape(fused, (1, d))))
    return ops.reshape(model.cls_fc2(h), (model.config.num_answers,))


class VqaNet(Module):
    """Question encoder plus bilinear fusion and classifier."""

    def __init__(self, encoder: BertEncoder | GruQuestionEncoder, fusion: BanFusion):
        if encoder.output_dim != fusion.config.question_dim:
            raise ConfigurationError(
                f"encoder emits {encoder.output_dim}-dim states but BAN expects {fusion.config.question_dim}"
            )
        self.encoder = encoder
        self.fusion = fusion

    @classmethod
    def build(cls, language: str, encoder_config: EncoderConfig | GruConfig, ban_config: BanConfig,
              dtype=None) -> "VqaNet":
        if language == "bert":
            enc = BertEncoder(encoder_config, dtype)
        elif language == "gru":
            enc = GruQuestionEncoder(encoder_config, dtype)
        else:
            raise ConfigurationError(f"unknown language model {language!r}; expected 'bert' or 'gru'")
        return cls(enc, BanFusion(ban_config, dtype))

    def parameter_groups(self) -> dict[str, list[Tensor]]:
        return {"language": self.encoder.parameters(), "base": self.fusion.parameters()}

    def encode_question(self, seq: TokenSequence, rng=None) -> QuestionEncoding:
        return self.encoder.encode(seq, rng)

    def logits(self, regions, seq: TokenSequence, rng=None) -> Tensor:
        dtype = self.fusion.att_p.dtype
        v = regions if isinstance(regions, Tensor) else Tensor(np.asarray(regions, dtype=dtype))
        enc = self.encode_question(seq, rng)
        fused, _ = ban_forward(v, enc.states, self.fusion, enc.mask)
        return answer_logits(fused, self.fusion)
