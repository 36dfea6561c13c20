"""Training loop, learning-rate schedules, VQA scoring and ensembling."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from .ban import VqaNet
from .errors import ConfigurationError, DimensionError, DivergenceError
from .language import TokenSequence
from .numerics import Tensor, no_grad, ops
from .numerics.optim import Adam

log = logging.getLogger(__name__)

QUESTION_TYPES = ("yesno", "number", "other")
TABLE_COLUMNS = ("Yes/No", "Num", "Others", "Score")


# --- losses and schedules ---------------------------------------------------------

def bce_soft_loss(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy between ``sigmoid(logits)`` and soft VQA scores."""
    return ops.bce_with_logits(logits, targets)


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float = 0.0) -> float:
    if total_steps <= 0:
        raise ValueError("cosine_lr needs total_steps >= 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def _constant(step: int, total_steps: int, lr_max: float, lr_min: float = 0.0) -> float:
    return lr_max


SCHEDULES: dict[str, Callable[[int, int, float, float], float]] = {"cosine": cosine_lr, "constant": _constant}


# --- configuration and data ------------------------------------------------------------

@dataclass
class TrainConfig:
    max_epochs: int = 20
    base_lr: float = 1e-3
    language_lr: float = 5e-5
    schedule: str = "cosine"
    batch_size: int = 32
    seed: int = 0
    attribute_loss_weight: float = 0.5
    target_train_accuracy: float | None = None

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ConfigurationError("max_epochs must be >= 1")
        if self.base_lr < 0 or self.language_lr < 0:
            raise ConfigurationError("learning rates must be non-negative")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.schedule not in SCHEDULES:
            raise ConfigurationError(f"unknown schedule {self.schedule!r}; choose from {sorted(SCHEDULES)}")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class VqaItem:
    """One question ready for the fusion model."""

    regions: np.ndarray
    tokens: TokenSequence
    targets: np.ndarray
    answers: list[int]
    qtype: str = "other"
    question_id: int = 0

    @property
    def label(self) -> int:
        return int(np.argmax(self.targets))


def soft_scores(annotator_answers: Sequence[int], num_answers: int) -> np.ndarray:
    """Per-answer target ``min(#agreeing annotators / 3, 1)``."""
    out = np.zeros(num_answers, dtype=np.float64)
    for ans, n in Counter(annotator_answers).items():
        out[ans] = min(n / 3.0, 1.0)
    return out


@dataclass
class TrainResult:
    epoch_losses: list[float]
    applied_lrs: list[dict[str, float]]
    epochs_run: int
    train_accuracy: float | None = None
    state: dict[str, np.ndarray] = field(default_factory=dict)


def _batch_loss(model: VqaNet, batch: Sequence[VqaItem], rng) -> Tensor:
    total = None
    for item in batch:
        loss = bce_soft_loss(model.logits(item.regions, item.tokens, rng), item.targets)
        total = loss if total is None else ops.add(total, loss)
    return ops.scale(total, 1.0 / len(batch))


def predict_logits(model: VqaNet, items: Sequence[VqaItem]) -> np.ndarray:
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            out = np.stack([model.logits(it.regions, it.tokens).data for it in items]).astype(np.float64)
    finally:
        model.train(was_training)
    return out


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def simple_accuracy(model: VqaNet, items: Sequence[VqaItem]) -> float:
    """Fraction of items whose argmax answer is the top-scored target answer."""
    pred = predict_logits(model, items).argmax(axis=1)
    return float(np.mean(pred == np.array([it.label for it in items])))


def train(model: VqaNet, dataset: Sequence[VqaItem], config: TrainConfig, checkpoint_path=None) -> TrainResult:
    """Mini-batch Adam with a language-encoder parameter group and a base group.

    Both groups are scaled by the same schedule factor each step, so their
    applied rates keep the configured ratio throughout.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    groups = model.parameter_groups()
    opt = Adam({"language": (groups["language"], config.language_lr), "base": (groups["base"], config.base_lr)})
    schedule = SCHEDULES[config.schedule]
    rng = np.random.default_rng([config.seed, 11])
    dropout_rng = np.random.default_rng([config.seed, 13])
    n = len(dataset)
    per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.max_epochs * per_epoch
    losses: list[float] = []
    applied: list[dict[str, float]] = []
    acc = None
    step = 0
    epoch = 0
    model.train()
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        running = 0.0
        for b in range(per_epoch):
            batch = [dataset[i] for i in order[b * config.batch_size:(b + 1) * config.batch_size]]
            opt.zero_grad()
            loss = _batch_loss(model, batch, dropout_rng)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(f"loss became {value} at epoch {epoch}, step {step}; lower the learning rate")
            loss.backward()
            applied.append(opt.step(schedule(step, total_steps, 1.0, 0.0)))
            running += value * len(batch)
            step += 1
        losses.append(running / n)
        log.info("epoch %d loss %.5f", epoch, losses[-1])
        if config.target_train_accuracy is not None:
            acc = simple_accuracy(model, dataset)
            if acc >= config.target_train_accuracy:
                break
    model.eval()
    result = TrainResult(losses, applied, epoch, acc, model.state_dict())
    if checkpoint_path is not None:
        from .io import save_checkpoint

        save_checkpoint(checkpoint_path, result.state)
    return result


# --- evaluation -----------------------------------------------------------------------------------

def vqa_accuracy(predicted, annotator_answers: Sequence) -> float:
    """``min(#annotators agreeing with the prediction / 3, 1)``."""
    if len(annotator_answers) == 0:
        raise ValueError("vqa_accuracy needs at least one annotator answer")
    return min(sum(1 for a in annotator_answers if a == predicted) / 3.0, 1.0)


@dataclass
class EvalReport:
    """Accuracies in percent; a type with no questions is ``None``."""

    yes_no: float | None
    number: float | None
    other: float | None
    overall: float | None
    counts: dict[str, int]

    def cells(self) -> dict[str, float | None]:
        return dict(zip(TABLE_COLUMNS, (self.yes_no, self.number, self.other, self.overall)))

    def to_kv(self, prefix: str = "") -> dict[str, str]:
        keys = ("yes_no", "number", "other", "score")
        out = {prefix + k: ("absent" if v is None else f"{v:.4f}") for k, v in zip(keys, self.cells().values())}
        for t in QUESTION_TYPES:
            out[f"{prefix}count_{t}"] = str(self.counts.get(t, 0))
        return out


def evaluate_predictions(predictions: Sequence[int], dataset: Sequence[VqaItem]) -> EvalReport:
    if len(predictions) != len(dataset):
        raise DimensionError(f"{len(predictions)} predictions for {len(dataset)} questions")
    buckets: dict[str, list[float]] = {t: [] for t in QUESTION_TYPES}
    scores = []
    for pred, item in zip(predictions, dataset):
        if item.qtype not in buckets:
            raise ValueError(f"unknown question type {item.qtype!r}; expected one of {QUESTION_TYPES}")
        s = vqa_accuracy(pred, item.answers)
        buckets[item.qtype].append(s)
        scores.append(s)

    def pct(vals):
        return 100.0 * math.fsum(vals) / len(vals) if vals else None

    return EvalReport(pct(buckets["yesno"]), pct(buckets["number"]), pct(buckets["other"]), pct(scores),
                      {t: len(v) for t, v in buckets.items()})


def evaluate(model, dataset: Sequence) -> EvalReport:
    """Per-type and overall VQA accuracy.

    ``model`` is either a :class:`VqaNet` scored on :class:`VqaItem` answer
    indices, or any estimator whose ``predict`` returns answers comparable to
    each question's ``answers``.
    """
    if isinstance(model, VqaNet):
        preds = [int(i) for i in predict_logits(model, dataset).argmax(axis=1)]
    else:
        preds = list(model.predict(dataset))
    return evaluate_predictions(preds, dataset)


def format_table(rows: Sequence[tuple[dict[str, str], EvalReport]], label_columns: Sequence[str] = ()) -> str:
    """Plain-text table: the given label columns, then Yes/No, Num, Others, Score."""
    header = list(label_columns) + list(TABLE_COLUMNS)
    body = []
    for labels, report in rows:
        cells = [str(labels.get(c, "-")) for c in label_columns]
        cells += ["absent" if v is None else f"{v:.2f}" for v in report.cells().values()]
        body.append(cells)
    widths = [max(len(h), *(len(r[i]) for r in body)) if body else len(h) for i, h in enumerate(header)]
    sep = "+" + "+".join("-" * (w + 2) for w in widths) + "+"

    def line(cells):
        return "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) + " |"

    return "\n".join([sep, line(header), sep, *(line(r) for r in body), sep]) + "\n"


# --- ensembling ------------------------------------------------------------------------------------

def _vocab(model):
    for attr in ("answer_vocab_", "classes_", "answer_vocab"):
        v = getattr(model, attr, None)
        if v is not None:
            return list(v)
    return None


def ensemble_predict(models: Sequence, inputs) -> np.ndarray:
    """Arithmetic mean of the members' answer distributions, summed in member order."""
    models = list(models)
    if not models:
        raise ValueError("ensemble needs at least one model")
    vocab = _vocab(models[0])
    for m in models[1:]:
        other = _vocab(m)
        if vocab is not None and other is not None and other != vocab:
            raise ValueError("ensemble members use different answer vocabularies")
    total = None
    for m in models:
        p = np.asarray(m.predict_proba(inputs), dtype=np.float64)
        if total is not None and p.shape != total.shape:
            raise ValueError(f"member distribution shape {p.shape} != {total.shape}")
        total = p.copy() if total is None else total + p
    return total / len(models)
