"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import NonDeterminismError
from .tensor import Tensor


@dataclass
class CheckReport:
    """Outcome of :func:`finite_diff_check`.

    ``max_rel_error`` holds one entry per checked tensor, in the order given.
    """

    max_rel_error: list[float]
    tol: float
    step: float
    names: list[str] = field(default_factory=list)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error, default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tol

    def __bool__(self) -> bool:
        return self.passed

    def summary(self) -> str:
        parts = [f"{n}={e:.2e}" for n, e in zip(self.names, self.max_rel_error)]
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} max_rel_err={self.worst:.3e} tol={self.tol:g} [{' '.join(parts)}]"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps round-off on
    vanishing gradients from reading as a large relative error."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5,
                      tol: float = 1e-4, floor: float = 1e-5) -> CheckReport:
    """Compare the tape gradient of scalar ``f()`` against central differences.

    ``f`` must rebuild its graph on every call. All ``params`` must be 64-bit.
    """
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise ValueError(f"finite_diff_check needs float64 parameters, got {p.dtype} for {p.name or p.shape}")
        if not np.all(np.isfinite(p.data)):
            raise ValueError("finite_diff_check: parameters must be finite")

    for p in params:
        p.requires_grad = True
        p.zero_grad()
    out = f()
    again = f()
    if out.size != 1:
        raise ValueError(f"finite_diff_check: f must return a scalar, got shape {out.shape}")
    if not np.array_equal(out.data, again.data):
        raise NonDeterminismError(
            f"two forward passes disagree ({out.item()!r} vs {again.item()!r}); f must be deterministic"
        )
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    errors: list[float] = []
    for p, a in zip(params, analytic):
        numeric = np.empty_like(p.data)
        flat = p.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f().item()
            flat[i] = orig - step
            fm = f().item()
            flat[i] = orig
            num_flat[i] = (fp - fm) / (2.0 * step)
        errors.append(float(relative_error(a, numeric, floor).max(initial=0.0)))
    for p in params:
        p.zero_grad()
    names = [p.name or f"param{i}" for i, p in enumerate(params)]
    return CheckReport(max_rel_error=errors, tol=tol, step=step, names=names)
