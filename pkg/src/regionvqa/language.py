"""Question encoders: a BERT-style transformer returning last-layer token
states, and a word-embedding + GRU baseline with 1280-dim states."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ConfigurationError, DimensionError
from .numerics import Module, Tensor, init_rng, ops
from .numerics.nn import Linear, const_param, normal_param

PAD_ID, CLS_ID, SEP_ID, UNK_ID = 0, 1, 2, 3
SEGMENT_A = 0


@dataclass
class EncoderConfig:
    num_layers: int = 12
    hidden_size: int = 768
    num_heads: int = 12
    ffn_size: int = 3072
    vocab_size: int = 30522
    max_positions: int = 512
    dropout: float = 0.1
    layer_norm_eps: float = 1e-12
    init_std: float = 0.02
    include_cls: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.num_layers < 0:
            raise ConfigurationError("num_layers must be >= 0")
        if min(self.num_heads, self.vocab_size, self.max_positions, self.hidden_size, self.ffn_size) < 1:
            raise ConfigurationError("heads, vocab, positions and widths must be >= 1")
        if self.hidden_size % self.num_heads:
            raise ConfigurationError(f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}")
        if self.max_positions < 2:
            raise ConfigurationError("max_positions must leave room for [CLS] and [SEP]")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must lie in [0, 1)")

    @classmethod
    def base(cls, **kw) -> "EncoderConfig":
        return cls(**kw)

    @classmethod
    def large(cls, **kw) -> "EncoderConfig":
        return cls(**{**dict(num_layers=24, hidden_size=1024, num_heads=16, ffn_size=4096), **kw})

    @classmethod
    def toy(cls, **kw) -> "EncoderConfig":
        return cls(**{**dict(num_layers=2, hidden_size=32, num_heads=4, ffn_size=64, vocab_size=64,
                             max_positions=32), **kw})

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class TokenSequence:
    ids: np.ndarray
    segments: np.ndarray
    positions: np.ndarray
    mask: np.ndarray
    status: str = "ok"
    warnings: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    def padded(self, length: int) -> "TokenSequence":
        """Append ``[PAD]`` slots (masked out) up to ``length``."""
        extra = length - len(self)
        if extra < 0:
            raise ValueError(f"cannot pad a length-{len(self)} sequence to {length}")
        return TokenSequence(
            ids=np.concatenate([self.ids, np.full(extra, PAD_ID, np.int64)]),
            segments=np.concatenate([self.segments, np.full(extra, SEGMENT_A, np.int64)]),
            positions=np.arange(length, dtype=np.int64),
            mask=np.concatenate([self.mask, np.zeros(extra, bool)]),
            status=self.status,
            warnings=list(self.warnings),
        )


def encode_question(token_ids, config: EncoderConfig) -> TokenSequence:
    """Wrap content tokens as ``[CLS] ... [SEP]`` with segment-A ids.

    Content longer than ``max_positions - 2`` is truncated with a warning.
    """
    ids = np.asarray(list(token_ids), dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise ValueError(f"token id out of range for vocab_size {config.vocab_size}")
    if np.any((ids == CLS_ID) | (ids == SEP_ID)):
        raise ValueError("question content may not contain [CLS] or [SEP]")
    status, notes = "ok", []
    limit = config.max_positions - 2
    if ids.size > limit:
        msg = f"question of {ids.size} tokens truncated to {limit}"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        ids, status, notes = ids[:limit], "truncated", [msg]
    full = np.concatenate([[CLS_ID], ids, [SEP_ID]]).astype(np.int64)
    t = full.size
    return TokenSequence(full, np.full(t, SEGMENT_A, np.int64), np.arange(t, dtype=np.int64),
                         np.ones(t, bool), status, notes)


@dataclass
class QuestionEncoding:
    """Per-token states ``T x d_out`` and the validity mask of the slots."""

    states: Tensor
    mask: np.ndarray

    @property
    def shape(self) -> tuple[int, ...]:
        return self.states.shape


# --- transformer ---------------------------------------------------------------------

class LayerNorm(Module):
    def __init__(self, width: int, eps: float, dtype=None):
        self.gamma = const_param((width,), 1.0, dtype)
        self.beta = const_param((width,), 0.0, dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)


class Embeddings(Module):
    def __init__(self, config: EncoderConfig, dtype=None):
        d, std = config.hidden_size, config.init_std
        self.token = normal_param(init_rng(config.seed, "emb.token"), (config.vocab_size, d), std, dtype)
        self.position = normal_param(init_rng(config.seed, "emb.position"), (config.max_positions, d), std, dtype)
        self.segment = normal_param(init_rng(config.seed, "emb.segment"), (2, d), std, dtype)
        self.norm = LayerNorm(d, config.layer_norm_eps, dtype)


class TransformerBlock(Module):
    def __init__(self, config: EncoderConfig, index: int, dtype=None):
        d, f, std, s = config.hidden_size, config.ffn_size, config.init_std, config.seed
        self.num_heads = config.num_heads
        self.query = Linear(d, d, init_rng(s, f"block{index}.query"), std, dtype=dtype)
        self.key = Linear(d, d, init_rng(s, f"block{index}.key"), std, dtype=dtype)
        self.value = Linear(d, d, init_rng(s, f"block{index}.value"), std, dtype=dtype)
        self.attn_out = Linear(d, d, init_rng(s, f"block{index}.attn_out"), std, dtype=dtype)
        self.attn_norm = LayerNorm(d, config.layer_norm_eps, dtype)
        self.ffn_in = Linear(d, f, init_rng(s, f"block{index}.ffn_in"), std, dtype=dtype)
        self.ffn_out = Linear(f, d, init_rng(s, f"block{index}.ffn_out"), std, dtype=dtype)
        self.ffn_norm = LayerNorm(d, config.layer_norm_eps, dtype)
        self.dropout = config.dropout


def embed_tokens(seq: TokenSequence, emb: Embeddings, dropout: float = 0.0,
                 rng: np.random.Generator | None = None, training: bool = False) -> Tensor:
    """Token + position + segment-A embeddings, layer-normalized, then dropout."""
    x = ops.add(ops.embedding(emb.token, seq.ids), ops.embedding(emb.position, seq.positions))
    x = ops.add(x, ops.embedding(emb.segment, seq.segments))
    return ops.dropout(emb.norm(x), dropout, rng, training)


def self_attention(x: Tensor, block: TransformerBlock, mask: np.ndarray | None = None,
                   rng: np.random.Generator | None = None, training: bool = False) -> tuple[Tensor, list[Tensor]]:
    """Multi-head scaled dot-product attention; returns the projected context
    and the per-head ``T x T`` weight matrices."""
    t, d = x.shape
    h = block.num_heads
    dh = d // h
    keep = np.ones(t, bool) if mask is None else np.asarray(mask, bool)
    if keep.shape != (t,):
        raise DimensionError(f"mask of shape {keep.shape} for {t} tokens")
    if not keep.any():
        raise ValueError("attention mask excludes every position")
    q, k, v = block.query(x), block.key(x), block.value(x)
    blocked = ~keep[None, :]
    heads, weights = [], []
    for i in range(h):
        cols = slice(i * dh, (i + 1) * dh)
        logits = ops.scale(ops.matmul(q[:, cols], ops.transpose(k[:, cols])), 1.0 / math.sqrt(dh))
        if blocked.any():
            logits = ops.masked_fill(logits, blocked, -np.inf)
        a = ops.softmax(logits, axis=-1)
        weights.append(a)
        heads.append(ops.matmul(ops.dropout(a, block.dropout, rng, training), v[:, cols]))
    ctx = heads[0] if h == 1 else ops.concat(heads, axis=1)
    return block.attn_out(ctx), weights


def transformer_block(x: Tensor, block: TransformerBlock, mask: np.ndarray | None = None,
                      rng: np.random.Generator | None = None, training: bool = False) -> Tensor:
    """Post-norm encoder block: attention and GELU feed-forward, each with a residual."""
    attn, _ = self_attention(x, block, mask, rng, training)
    x = block.attn_norm(ops.add(x, ops.dropout(attn, block.dropout, rng, training)))
    ff = block.ffn_out(ops.gelu(block.ffn_in(x)))
    return block.ffn_norm(ops.add(x, ops.dropout(ff, block.dropout, rng, training)))


class BertEncoder(Module):
    """Embeddings followed by ``num_layers`` transformer blocks."""

    def __init__(self, config: EncoderConfig, dtype=None):
        self.config = config
        self.embeddings = Embeddings(config, dtype)
        self.blocks = [TransformerBlock(config, i, dtype) for i in range(config.num_layers)]

    @property
    def output_dim(self) -> int:
        return self.config.hidden_size

    def encode(self, seq: TokenSequence, rng: np.random.Generator | None = None) -> QuestionEncoding:
        return encode(seq, self, rng)


def encode(seq: TokenSequence, model: BertEncoder, rng: np.random.Generator | None = None) -> QuestionEncoding:
    """Final-layer per-token states (no pooling)."""
    if len(seq) > model.config.max_positions:
        raise ValueError(f"sequence of {len(seq)} exceeds max_positions {model.config.max_positions}")
    training = model.training
    x = embed_tokens(seq, model.embeddings, model.config.dropout, rng, training)
    for block in model.blocks:
        x = transformer_block(x, block, seq.mask, rng, training)
    mask = seq.mask.copy()
    if not model.config.include_cls:
        mask &= seq.ids != CLS_ID
    return QuestionEncoding(x, mask)


def param_count(config: EncoderConfig) -> int:
    """Closed-form number of scalar parameters in :class:`BertEncoder`."""
    d, f, v, p = config.hidden_size, config.ffn_size, config.vocab_size, config.max_positions
    embeddings = v * d + p * d + 2 * d + 2 * d
    attention = 4 * (d * d + d) + 2 * d
    feed_forward = d * f + f + f * d + d + 2 * d
    return embeddings + config.num_layers * (attention + feed_forward)


# --- GRU baseline ---------------------------------------------------------------------------

@dataclass
class GruConfig:
    vocab_size: int = 30522
    embed_dim: int = 300
    hidden_size: int = 1280
    init_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if min(self.vocab_size, self.embed_dim, self.hidden_size) < 1:
            raise ConfigurationError("GRU dimensions must be >= 1")


class GruQuestionEncoder(Module):
    """Learned word embeddings feeding a single-layer GRU (gate order r, z, n)."""

    def __init__(self, config: GruConfig, dtype=None):
        self.config = config
        e, hd, s = config.embed_dim, config.hidden_size, config.seed
        self.embedding = normal_param(init_rng(s, "gru.embedding"), (config.vocab_size, e), config.init_std, dtype)
        bound = 1.0 / math.sqrt(hd)
        self.w_ih = normal_param(init_rng(s, "gru.w_ih"), (e, 3 * hd), bound, dtype)
        self.w_hh = normal_param(init_rng(s, "gru.w_hh"), (hd, 3 * hd), bound, dtype)
        self.b_ih = const_param((3 * hd,), 0.0, dtype)
        self.b_hh = const_param((3 * hd,), 0.0, dtype)

    @property
    def output_dim(self) -> int:
        return self.config.hidden_size

    def encode(self, seq: TokenSequence, rng: np.random.Generator | None = None) -> QuestionEncoding:
        return QuestionEncoding(gru_baseline_encode(seq, self.embedding, self), seq.mask.copy())


def gru_baseline_encode(seq: TokenSequence, embedding_table: Tensor, gru: GruQuestionEncoder) -> Tensor:
    """Per-step hidden states ``T x hidden`` of the GRU over embedded tokens."""
    if embedding_table.ndim != 2 or embedding_table.shape[1] != gru.w_ih.shape[0]:
        raise DimensionError(f"embedding table {embedding_table.shape} does not feed GRU input {gru.w_ih.shape[0]}")
    hd = gru.w_hh.shape[0]
    x = ops.embedding(embedding_table, seq.ids)
    gates_x = ops.add(ops.matmul(x, gru.w_ih), gru.b_ih)
    h = Tensor(np.zeros((1, hd), dtype=gru.w_hh.dtype))
    states = []
    for t in range(len(seq)):
        gx = gates_x[t:t + 1]
        gh = ops.add(ops.matmul(h, gru.w_hh), gru.b_hh)
        r = ops.sigmoid(ops.add(gx[:, :hd], gh[:, :hd]))
        z = ops.sigmoid(ops.add(gx[:, hd:2 * hd], gh[:, hd:2 * hd]))
        n = ops.tanh(ops.add(gx[:, 2 * hd:], ops.mul(r, gh[:, 2 * hd:])))
        h = ops.add(ops.mul(ops.add_scalar(ops.neg(z), 1.0), n), ops.mul(z, h))
        states.append(h)
    return ops.concat(states, axis=0)
