"""Ablation harness: trains one pipeline per configuration row, scores each on
a held-out split, and adds a probability-averaging ensemble of all rows.

Rows vary the detector FPN width, the attribute head, the question encoder
and multi-scale detector training.  Labels name the full-scale setting a row
stands for; at toy scale the FPN width is divided by ``fpn_scale``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

from sklearn.base import clone

from .data import VqaExample, token_vocab
from .estimators import BanVQAClassifier, ProbabilityAveragingEnsemble, RegionFeatureExtractor, VqaPipeline
from .training import EvalReport, evaluate, format_table

log = logging.getLogger(__name__)

LABEL_COLUMNS = ("Model", "FPN dim", "Attribute", "Language", "MS-train")


@dataclass
class AblationRow:
    name: str
    fpn_dim: int = 256
    attribute_head: bool = True
    language: str = "bert"
    multiscale: bool = False
    extra: dict = field(default_factory=dict)

    def labels(self) -> dict[str, str]:
        return {"Model": self.name, "FPN dim": str(self.fpn_dim), "Attribute": "yes" if self.attribute_head else "no",
                "Language": "BERT" if self.language == "bert" else "GRU", "MS-train": "yes" if self.multiscale else "no"}


def default_rows() -> list[AblationRow]:
    """Baseline plus one row per ablation axis."""
    return [
        AblationRow("baseline"),
        AblationRow("no-attribute", attribute_head=False),
        AblationRow("fpn-512", fpn_dim=512),
        AblationRow("gru", language="gru"),
        AblationRow("ms-train", multiscale=True),
    ]


def toy_extractor(**overrides) -> RegionFeatureExtractor:
    params = dict(fpn_dim=16, embed_dim=32, max_regions=8, num_object_classes=6, num_attribute_classes=8,
                  backbone_channels=(8, 16, 32), pool_size=3, canonical_box_size=8.0, detector_epochs=1,
                  learning_rate=1e-3)
    params.update(overrides)
    return RegionFeatureExtractor(**params)


def toy_classifier(answer_vocab: Sequence[str], **overrides) -> BanVQAClassifier:
    params = dict(answer_vocab=list(answer_vocab), hidden_size=32, num_layers=2, num_heads=4, ffn_size=64,
                  vocab_size=len(token_vocab()), max_positions=32, word_dim=16, gru_hidden=32, glimpses=2,
                  joint_dim=32, max_epochs=20, batch_size=8)
    params.update(overrides)
    return BanVQAClassifier(**params)


def build_pipeline(row: AblationRow, answer_vocab: Sequence[str], fpn_scale: int = 16, seed: int = 0,
                   extractor: RegionFeatureExtractor | None = None,
                   classifier: BanVQAClassifier | None = None) -> VqaPipeline:
    """Pipeline for one row, derived from the given (or toy) templates."""
    ext = clone(extractor) if extractor is not None else toy_extractor()
    clf = clone(classifier) if classifier is not None else toy_classifier(answer_vocab)
    fpn = max(1, row.fpn_dim // fpn_scale)
    ext.set_params(fpn_dim=fpn, attribute_head=row.attribute_head, multiscale=row.multiscale, random_state=seed)
    clf.set_params(language=row.language, answer_vocab=list(answer_vocab), random_state=seed,
                   **row.extra)
    return VqaPipeline(ext, clf)


def run_ablation(train: Sequence[VqaExample], test: Sequence[VqaExample], answer_vocab: Sequence[str],
                 rows: Sequence[AblationRow] | None = None, ensemble: bool = True, fpn_scale: int = 16,
                 seed: int = 0, extractor=None, classifier=None) -> list[tuple[dict[str, str], EvalReport]]:
    """Fit every row on ``train`` and evaluate on ``test``; optionally append the
    ensemble of all fitted rows."""
    rows = list(rows) if rows is not None else default_rows()
    if not rows:
        raise ValueError("ablation needs at least one row")
    results, fitted = [], []
    for row in rows:
        log.info("ablation row %s", row.name)
        pipe = build_pipeline(row, answer_vocab, fpn_scale, seed, extractor, classifier).fit(train)
        fitted.append(pipe)
        results.append((row.labels(), evaluate(pipe, test)))
    if ensemble:
        ens = ProbabilityAveragingEnsemble(fitted).fit(train)
        labels = {"Model": f"ensemble({len(fitted)})", "FPN dim": "mixed", "Attribute": "mixed",
                  "Language": "mixed", "MS-train": "mixed"}
        results.append((labels, evaluate(ens, test)))
    return results


def ablation_table(results) -> str:
    return format_table(results, LABEL_COLUMNS)
