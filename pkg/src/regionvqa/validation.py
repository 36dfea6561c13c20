"""Input checks used by the estimator wrappers."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import DimensionError


def check_region_matrix(regions, dim: int | None = None) -> np.ndarray:
    arr = np.asarray(regions, dtype=np.float32)
    if arr.ndim != 2:
        raise DimensionError(f"region features must be K x D, got shape {arr.shape}")
    if dim is not None and arr.shape[1] != dim:
        raise DimensionError(f"region features have {arr.shape[1]} dims, model expects {dim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("region features contain NaN or Inf")
    return arr


def check_token_ids(tokens, vocab_size: int) -> list[int]:
    ids = [int(t) for t in tokens]
    bad = [t for t in ids if t < 0 or t >= vocab_size]
    if bad:
        raise ValueError(f"token ids {bad[:5]} outside vocabulary of size {vocab_size}")
    return ids


def check_soft_targets(y, num_answers: int | None = None) -> np.ndarray:
    arr = np.asarray(y, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"targets must be n x A soft scores, got shape {arr.shape}")
    if num_answers is not None and arr.shape[1] != num_answers:
        raise DimensionError(f"targets have {arr.shape[1]} answers, expected {num_answers}")
    if np.any(arr < 0) or np.any(arr > 1) or not np.all(np.isfinite(arr)):
        raise ValueError("soft targets must lie in [0, 1]")
    return arr


def check_image(image) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 3:
        raise DimensionError(f"images must be C x H x W, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains NaN or Inf")
    return arr


def check_consistent_length(*seqs: Sequence) -> None:
    lengths = {len(s) for s in seqs}
    if len(lengths) > 1:
        raise ValueError(f"inputs have inconsistent lengths {sorted(lengths)}")
