"""Minimal parameter containers built on the tape."""

from __future__ import annotations

import zlib
from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor, get_default_dtype


def init_rng(seed: int, name: str) -> np.random.Generator:
    """Generator for the parameters under ``name``.

    Streams are keyed by name so adding or removing one submodule never
    shifts the initial values of another.
    """
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))])


def normal_param(rng: np.random.Generator, shape, std: float, dtype=None) -> Tensor:
    dtype = np.dtype(dtype or get_default_dtype())
    data = rng.standard_normal(shape, dtype=dtype)
    data *= dtype.type(std)
    return Tensor(data, requires_grad=True)


def const_param(shape, value: float, dtype=None) -> Tensor:
    dtype = np.dtype(dtype or get_default_dtype())
    return Tensor(np.full(shape, value, dtype=dtype), requires_grad=True)


class Module:
    """Holds parameters as attributes; submodules and lists of submodules nest."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for attr, val in vars(self).items():
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield prefix + attr, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{attr}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{attr}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def _children(self) -> Iterator["Module"]:
        for val in vars(self).values():
            if isinstance(val, Module):
                yield val
            elif isinstance(val, (list, tuple)):
                yield from (m for m in val if isinstance(m, Module))

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            if name not in state:
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != parameter shape {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)


class Linear(Module):
    """``y = x @ W + b`` with ``W`` stored as ``in x out``."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, std: float = 0.02,
                 bias: bool = True, dtype=None):
        self.weight = normal_param(rng, (in_features, out_features), std, dtype)
        self.bias = const_param((out_features,), 0.0, dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.weight)
        return ops.add(y, self.bias) if self.bias is not None else y
