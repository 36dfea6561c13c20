"""Finite-difference checks for every differentiable building block.

Each case draws a fresh random toy instance per seed, reduces the output to
a scalar with fixed random weights and runs :func:`finite_diff_check`.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ban as ban_mod
from . import language as lang
from . import region_features as rf
from .numerics import Tensor, finite_diff_check, ops, precision
from .numerics.gradcheck import CheckReport

Case = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]


def _p(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _weighted(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    w = Tensor(rng.standard_normal(out.shape))
    return lambda y: ops.sum(ops.mul(y, w))


def _generic(params: list[Tensor], rng, scale: float = 0.5) -> list[Tensor]:
    """Redraw every parameter so no pre-activation starts exactly on a ReLU kink
    (zero-initialized biases would put zero inputs right at it)."""
    for p in params:
        p.data = rng.standard_normal(p.shape) * scale
    return params


def _reduce(build: Callable[[], Tensor], rng) -> Callable[[], Tensor]:
    red = _weighted(build(), rng)
    return lambda: red(build())


def case_matmul(rng):
    m, k, n = rng.integers(1, 5, 3)
    a, b = _p(rng, m, k), _p(rng, k, n)
    return _reduce(lambda: ops.matmul(a, b), rng), [a, b]


def case_softmax(rng):
    x = _p(rng, 3, 4, scale=2.0)
    axis = [-1, 0, None][int(rng.integers(3))]
    return _reduce(lambda: ops.softmax(x, axis=axis), rng), [x]


def case_log_softmax(rng):
    x = _p(rng, 3, 5, scale=2.0)
    return _reduce(lambda: ops.log_softmax(x, axis=-1), rng), [x]


def case_layer_norm(rng):
    x, g, b = _p(rng, 3, 5), _p(rng, 5), _p(rng, 5)
    return _reduce(lambda: ops.layer_norm(x, g, b, 1e-5), rng), [x, g, b]


def _activation_case(kind):
    def case(rng):
        x = _p(rng, 4, 3)
        return _reduce(lambda: ops.activation(x, kind), rng), [x]
    case.__name__ = f"case_{kind}"
    return case


def case_elementwise(rng):
    a, b, v = _p(rng, 3, 4), _p(rng, 3, 4), _p(rng, 4)
    return _reduce(lambda: ops.add(ops.mul(ops.sub(a, b), v), ops.mul(a, b)), rng), [a, b, v]


def case_dropout(rng):
    x = _p(rng, 4, 5)
    seed = int(rng.integers(1 << 30))
    return _reduce(lambda: ops.dropout(x, 0.3, np.random.default_rng(seed), True), rng), [x]


def case_conv2d(rng):
    c, o = rng.integers(1, 3, 2)
    stride = int(rng.integers(1, 3))
    x, w, b = _p(rng, c, 5, 6), _p(rng, o, c, 3, 3), _p(rng, o)
    return _reduce(lambda: ops.conv2d(x, w, b, stride=stride, padding=1), rng), [x, w, b]


def case_upsample(rng):
    x = _p(rng, 2, 3, 2)
    return _reduce(lambda: ops.upsample_nearest(x, (6, 3)), rng), [x]


def case_roi_align(rng):
    fmap = _p(rng, 2, 6, 7)
    n = int(rng.integers(1, 4))
    xy = rng.uniform(0, 10, (n, 2))
    wh = rng.uniform(1, 6, (n, 2))
    boxes = np.concatenate([xy, xy + wh], axis=1)
    return _reduce(lambda: ops.roi_align(fmap, boxes, (2, 3), 2, 0.5), rng), [fmap]


def case_region_embedding(rng):
    emb = rf.RegionEmbedding(2 * 2 * 2, 5, int(rng.integers(1 << 30)))
    pooled = _p(rng, 3, 2, 2, 2)
    return _reduce(lambda: emb(pooled), rng), [pooled] + _generic(emb.parameters(), rng)


def case_attribute_chain(rng):
    cfg = rf.DetectorConfig.toy(fpn_dim=2, embed_dim=4, pool_size=2, num_attribute_classes=3,
                                backbone_channels=(2, 2, 2), seed=int(rng.integers(1 << 30)))
    det = rf.RegionDetector(cfg)
    pooled = _p(rng, 2, 2, 2, 2)
    labels = rng.integers(0, 3, 2)
    f = lambda: ops.cross_entropy(det.attribute_logits(det.embedding(pooled)), labels)
    return f, [pooled] + _generic(det.embedding.parameters() + det.attribute_head.parameters(), rng)


def case_detector(rng):
    cfg = rf.DetectorConfig.toy(fpn_dim=2, embed_dim=3, pool_size=2, num_object_classes=2, num_attribute_classes=2,
                                backbone_channels=(2, 2, 2), canonical_box_size=4.0, seed=int(rng.integers(1 << 30)))
    det = rf.RegionDetector(cfg)
    image = Tensor(rng.standard_normal((3, 8, 8)))
    boxes = np.array([[0.5, 1.0, 6.0, 7.5], [2.0, 2.0, 4.0, 5.0]])
    labels, attrs, fg = np.array([1, 0]), np.array([1, 0]), np.array([True, False])
    return (lambda: rf.detector_loss(det, image, boxes, labels, attrs, fg)), _generic(det.parameters(), rng)


def _toy_encoder_config(rng, **kw):
    return lang.EncoderConfig(**{**dict(num_layers=1, hidden_size=4, num_heads=2, ffn_size=6, vocab_size=7,
                                        max_positions=6, dropout=0.0, layer_norm_eps=1e-5, init_std=0.5,
                                        seed=int(rng.integers(1 << 30))), **kw})


def case_embed_tokens(rng):
    cfg = _toy_encoder_config(rng)
    emb = lang.Embeddings(cfg)
    seq = lang.encode_question(rng.integers(3, 7, 2), cfg)
    return _reduce(lambda: lang.embed_tokens(seq, emb), rng), _generic(emb.parameters(), rng)


def case_attention_block(rng):
    cfg = _toy_encoder_config(rng)
    block = lang.TransformerBlock(cfg, 0)
    x = _p(rng, 3, 4)
    mask = np.array([True, True, bool(rng.integers(2))])
    return _reduce(lambda: lang.transformer_block(x, block, mask), rng), [x] + _generic(block.parameters(), rng)


def case_encoder(rng):
    cfg = _toy_encoder_config(rng, num_layers=2)
    enc = lang.BertEncoder(cfg).eval()
    seq = lang.encode_question(rng.integers(3, 7, 2), cfg)
    return _reduce(lambda: enc.encode(seq).states, rng), _generic(enc.parameters(), rng)


def case_gru(rng):
    cfg = lang.GruConfig(vocab_size=6, embed_dim=3, hidden_size=4, init_std=0.7, seed=int(rng.integers(1 << 30)))
    gru = lang.GruQuestionEncoder(cfg)
    seq = lang.encode_question(rng.integers(3, 6, 2), _toy_encoder_config(rng))
    return _reduce(lambda: lang.gru_baseline_encode(seq, gru.embedding, gru), rng), _generic(gru.parameters(), rng)


def _toy_ban(rng, **kw):
    cfg = ban_mod.BanConfig(**{**dict(glimpses=2, joint_dim=3, visual_dim=4, question_dim=3, num_answers=5,
                                      classifier_hidden=4, init_std=0.8, seed=int(rng.integers(1 << 30))), **kw})
    return ban_mod.BanFusion(cfg)


def case_bilinear_attention(rng):
    model = _toy_ban(rng)
    v, q = _p(rng, 3, 4), _p(rng, 2, 3)
    g = int(rng.integers(2))
    params = [v, q] + _generic(model.att_v.parameters() + model.att_q.parameters() + [model.att_p], rng)
    return _reduce(lambda: ban_mod.bilinear_attention_map(v, q, g, model), rng), params


def case_glimpse_join(rng):
    model = _toy_ban(rng)
    v, q = _p(rng, 3, 4), _p(rng, 2, 3)
    logits = _p(rng, 3, 2)
    f = lambda: ban_mod.glimpse_join(v, q, ops.softmax(logits, axis=None), 1, model)
    return _reduce(f, rng), [v, q, logits] + _generic(model.join_v[1].parameters() + model.join_q[1].parameters(), rng)


def case_ban_forward(rng):
    model = _toy_ban(rng, residual_init=["zeros", "first_join"][int(rng.integers(2))])
    v, q = _p(rng, 3, 4), _p(rng, 3, 3)
    mask = np.array([True, True, False])
    return _reduce(lambda: ban_mod.ban_forward(v, q, model, mask)[0], rng), [v, q] + _generic(model.parameters(), rng)


def case_classifier(rng):
    model = _toy_ban(rng)
    f_vec = _p(rng, 3)
    head = _generic(model.cls_fc1.parameters() + model.cls_fc2.parameters(), rng)
    return _reduce(lambda: ban_mod.answer_logits(f_vec, model), rng), [f_vec] + head


def case_bce(rng):
    x = _p(rng, 6, scale=2.0)
    t = rng.uniform(0, 1, 6)
    return (lambda: ops.bce_with_logits(x, t)), [x]


def case_cross_entropy(rng):
    x = _p(rng, 4, 3, scale=2.0)
    labels = rng.integers(0, 3, 4)
    return (lambda: ops.cross_entropy(x, labels)), [x]


def case_end_to_end(rng):
    enc_cfg = _toy_encoder_config(rng)
    net = ban_mod.VqaNet.build("bert", enc_cfg, ban_mod.BanConfig(
        glimpses=2, joint_dim=3, visual_dim=4, question_dim=4, num_answers=3, classifier_hidden=3, init_std=0.8,
        seed=int(rng.integers(1 << 30)))).eval()
    emb = rf.RegionEmbedding(2 * 2 * 2, 4, int(rng.integers(1 << 30)))
    pooled = _p(rng, 2, 2, 2, 2)
    seq = lang.encode_question(rng.integers(3, 7, 2), enc_cfg)
    target = rng.uniform(0, 1, 3)
    f = lambda: ops.bce_with_logits(net.logits(emb(pooled), seq), target)
    return f, [pooled] + _generic(emb.parameters() + net.parameters(), rng)


CASES: dict[str, Case] = {
    "matmul": case_matmul,
    "softmax": case_softmax,
    "log_softmax": case_log_softmax,
    "layer_norm": case_layer_norm,
    "relu": _activation_case("relu"),
    "gelu": _activation_case("gelu"),
    "tanh": _activation_case("tanh"),
    "sigmoid": _activation_case("sigmoid"),
    "elementwise": case_elementwise,
    "dropout": case_dropout,
    "conv2d": case_conv2d,
    "upsample_nearest": case_upsample,
    "roi_align": case_roi_align,
    "region_embedding": case_region_embedding,
    "attribute_head": case_attribute_chain,
    "detector_loss": case_detector,
    "embed_tokens": case_embed_tokens,
    "attention_block": case_attention_block,
    "encoder": case_encoder,
    "gru": case_gru,
    "bilinear_attention": case_bilinear_attention,
    "glimpse_join": case_glimpse_join,
    "ban_forward": case_ban_forward,
    "classifier": case_classifier,
    "bce_soft_loss": case_bce,
    "cross_entropy": case_cross_entropy,
    "end_to_end": case_end_to_end,
}


# multi-layer chains re-check ops already covered one by one; fewer draws keep the suite fast
COMPOSITE_INSTANCES = {"detector_loss": 25, "encoder": 25, "end_to_end": 25}


@dataclass
class CaseResult:
    name: str
    instances: int
    worst: float
    failures: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.failures == 0


def run_case(name: str, instances: int = 100, seed: int = 0, step: float = 1e-5, tol: float = 1e-4) -> CaseResult:
    case = CASES[name]
    worst, failures = 0.0, 0
    start = time.perf_counter()
    with precision("float64"):
        for i in range(instances):
            rng = np.random.default_rng([seed, i, sum(map(ord, name))])
            f, params = case(rng)
            report: CheckReport = finite_diff_check(f, params, step=step, tol=tol)
            worst = max(worst, report.worst)
            failures += not report.passed
    return CaseResult(name, instances, worst, failures, time.perf_counter() - start)


def run_suite(instances: int = 100, seed: int = 0, names=None, step: float = 1e-5,
              tol: float = 1e-4) -> list[CaseResult]:
    """Run each case; composite chains use ``COMPOSITE_INSTANCES`` draws unless
    that exceeds ``instances``."""
    return [run_case(n, min(instances, COMPOSITE_INSTANCES.get(n, instances)), seed, step, tol)
            for n in (names or CASES)]


def format_results(results: list[CaseResult]) -> str:
    lines = [f"{'case':<20} {'n':>4} {'max_rel_err':>12} {'fail':>5} {'sec':>6}"]
    for r in results:
        lines.append(f"{r.name:<20} {r.instances:>4} {r.worst:>12.3e} {r.failures:>5} {r.seconds:>6.2f}")
    worst = max((r.worst for r in results), default=0.0)
    ok = all(r.passed for r in results)
    lines.append(f"overall max_rel_err={worst:.3e} {'PASS' if ok else 'FAIL'}")
    return "\n".join(lines) + "\n"
