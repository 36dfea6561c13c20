"""File formats: region feature files ("RVQF"), named-tensor checkpoints
("RVQW") and flat ``key=value`` text.

All binary fields are little-endian.
"""

from __future__ import annotations

import dataclasses
import struct
import typing
from pathlib import Path
from typing import Any, BinaryIO

import numpy as np

from .errors import ConfigurationError, FormatError
from .region_features import Box, RegionFeatureSet

RVQF_MAGIC = b"RVQF"
RVQF_VERSION = 1
RVQW_MAGIC = b"RVQW"
_BOX_DTYPE = np.dtype([("coords", "<f4", (4,)), ("score", "<f4"), ("category", "<u4")])


# --- region features -------------------------------------------------------------------

def region_features_to_bytes(regions: RegionFeatureSet) -> bytes:
    k = len(regions.boxes)
    d = regions.features.shape[1]
    rec = np.zeros(k, dtype=_BOX_DTYPE)
    for i, b in enumerate(regions.boxes):
        rec[i] = (b.coords(), b.score, b.category)
    head = RVQF_MAGIC + struct.pack("<III", RVQF_VERSION, k, d)
    return head + rec.tobytes() + np.ascontiguousarray(regions.features, dtype="<f4").tobytes()


def region_features_from_bytes(buf: bytes) -> RegionFeatureSet:
    if len(buf) < 16 or buf[:4] != RVQF_MAGIC:
        raise FormatError("not a region feature file (bad magic)")
    version, k, d = struct.unpack_from("<III", buf, 4)
    if version != RVQF_VERSION:
        raise FormatError(f"unsupported region feature version {version}")
    off = 16
    need = off + k * _BOX_DTYPE.itemsize + k * d * 4
    if len(buf) != need:
        raise FormatError(f"region feature file has {len(buf)} bytes, expected {need}")
    rec = np.frombuffer(buf, dtype=_BOX_DTYPE, count=k, offset=off)
    off += k * _BOX_DTYPE.itemsize
    feats = np.frombuffer(buf, dtype="<f4", count=k * d, offset=off).reshape(k, d).astype(np.float32)
    boxes = [Box(*(float(c) for c in r["coords"]), score=float(r["score"]), category=int(r["category"]))
             for r in rec]
    return RegionFeatureSet(boxes, feats)


def write_region_features(path, regions: RegionFeatureSet) -> None:
    Path(path).write_bytes(region_features_to_bytes(regions))


def read_region_features(path) -> RegionFeatureSet:
    return region_features_from_bytes(Path(path).read_bytes())


# --- checkpoints ---------------------------------------------------------------------------

def _write_tensor(fh: BinaryIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise FormatError(f"tensor name too long: {name[:40]}...")
    arr = np.asarray(arr)
    if arr.ndim > 0xFF:
        raise FormatError(f"tensor {name} has rank {arr.ndim}")
    fh.write(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def checkpoint_to_bytes(tensors: dict[str, np.ndarray]) -> bytes:
    import io as _io

    fh = _io.BytesIO()
    fh.write(RVQW_MAGIC + struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        _write_tensor(fh, name, arr)
    return fh.getvalue()


def checkpoint_from_bytes(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 8 or buf[:4] != RVQW_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    (count,) = struct.unpack_from("<I", buf, 4)
    off = 8
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            n = int(np.prod(shape, dtype=np.int64))
            if off + 4 * n > len(buf):
                raise FormatError(f"tensor {name!r} runs past end of file")
            out[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
            off += 4 * n
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint: {exc}") from exc
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes after {count} tensors")
    return out


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(tensors))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return checkpoint_from_bytes(Path(path).read_bytes())


def text_to_tensor(text: str) -> np.ndarray:
    """UTF-8 bytes as a rank-1 float tensor (every byte value is exact in f32)."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def tensor_to_text(arr: np.ndarray) -> str:
    return np.asarray(arr).astype(np.uint8).tobytes().decode("utf-8")


# --- key=value text ----------------------------------------------------------------------------

def parse_kv(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigurationError(f"line {lineno}: empty key")
        out[key] = value
    return out


def format_kv(values: dict[str, Any]) -> str:
    lines = []
    for key, val in values.items():
        if isinstance(val, (list, tuple)):
            val = ",".join(str(v) for v in val)
        elif isinstance(val, bool):
            val = "true" if val else "false"
        elif val is None:
            val = "none"
        lines.append(f"{key}={val}")
    return "\n".join(lines) + "\n"


def read_kv(path) -> dict[str, str]:
    return parse_kv(Path(path).read_text(encoding="utf-8"))


def write_kv(path, values: dict[str, Any]) -> None:
    Path(path).write_text(format_kv(values), encoding="utf-8")


def _coerce(raw: str, hint) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        if raw.lower() == "none" and type(None) in args:
            return None
        hint = next(a for a in args if a is not type(None))
        return _coerce(raw, hint)
    if origin is tuple or hint is tuple:
        inner = args[0] if args else str
        return tuple(_coerce(p.strip(), inner) for p in raw.split(",") if p.strip())
    if hint is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"not a boolean: {raw!r}")
    if hint is int:
        return int(raw)
    if hint is float:
        return float(raw)
    return raw


def coerce_fields(cls, values: dict[str, str], prefix: str = "") -> dict[str, Any]:
    """Pick ``prefix + field`` keys for dataclass ``cls`` and convert them by annotation."""
    hints = typing.get_type_hints(cls)
    out = {}
    for f in dataclasses.fields(cls):
        key = prefix + f.name
        if key in values:
            try:
                out[f.name] = _coerce(values[key], hints[f.name])
            except (ValueError, StopIteration) as exc:
                raise ConfigurationError(f"bad value for {key}: {values[key]!r}") from exc
    return out
