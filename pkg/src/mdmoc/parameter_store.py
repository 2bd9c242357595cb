"""Checkpoints, flat parameter vectors, task deltas and the vector algebra they share.

All arithmetic runs in float64 regardless of the dtype a checkpoint was
stored with.  Layers are flattened in lexicographic order of their names so
that the same checkpoint always produces the same vector and hash.
"""

from __future__ import annotations

import hashlib
import io
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import (
    CheckpointFormatError,
    IntegrityError,
    LayoutMismatchError,
    NonFiniteError,
    ShapeError,
    TruncatedFileError,
    ValidationError,
)

MAGIC = b"MDMC"
VERSION = 1
EPS_SCALE = 1e-12

_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes, h: int = _FNV_OFFSET) -> int:
    """64-bit FNV-1a; pass ``h`` to continue a running hash."""
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


def content_hash(values: np.ndarray) -> str:
    """SHA-256 of the little-endian float64 bytes of ``values``."""
    return hashlib.sha256(np.ascontiguousarray(values, dtype="<f8").tobytes()).hexdigest()


# ---------------------------------------------------------------------------
# layouts and vectors


@dataclass(frozen=True)
class LayerEntry:
    name: str
    shape: tuple[int, ...]
    offset: int
    length: int


@dataclass(frozen=True)
class LayerLayout:
    entries: tuple[LayerEntry, ...] = ()

    def __post_init__(self):
        offset = 0
        names = set()
        for e in self.entries:
            if e.name in names:
                raise ValidationError(f"duplicate layer name {e.name!r}")
            names.add(e.name)
            if e.offset != offset:
                raise ValidationError(f"layer {e.name!r} offset {e.offset} is not contiguous (expected {offset})")
            if e.length != math.prod(e.shape):
                raise ShapeError(f"layer {e.name!r} length {e.length} does not match shape {e.shape}")
            offset += e.length

    @classmethod
    def from_shapes(cls, shapes: Mapping[str, tuple[int, ...]]) -> "LayerLayout":
        entries = []
        offset = 0
        for name in sorted(shapes):
            shape = tuple(int(s) for s in shapes[name])
            n = math.prod(shape)
            entries.append(LayerEntry(name, shape, offset, n))
            offset += n
        return cls(tuple(entries))

    @property
    def total(self) -> int:
        if not self.entries:
            return 0
        last = self.entries[-1]
        return last.offset + last.length

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def slice(self, name: str) -> slice:
        for e in self.entries:
            if e.name == name:
                return slice(e.offset, e.offset + e.length)
        raise KeyError(name)


def _frozen(values, length=None) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True).reshape(-1)
    if length is not None and arr.shape[0] != length:
        raise ShapeError(f"vector has {arr.shape[0]} values, layout expects {length}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("vector contains non-finite values")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class ParameterVector:
    values: np.ndarray
    layout: LayerLayout

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values, self.layout.total))

    def __len__(self):
        return self.values.shape[0]

    def with_values(self, values) -> "ParameterVector":
        return ParameterVector(values, self.layout)


@dataclass(frozen=True, eq=False)
class DeltaRecord:
    """A task delta, raw or orthogonalized.

    ``scale_factors`` is empty unless the record went through
    :func:`normalize_delta`.
    """

    model_id: str
    values: np.ndarray
    layout: LayerLayout
    scale_factors: tuple[float, ...] = ()
    orthogonalized: bool = False
    source_hash: str = ""

    def __post_init__(self):
        if not self.model_id:
            raise ValidationError("model_id must be non-empty")
        object.__setattr__(self, "values", _frozen(self.values, self.layout.total))
        sf = tuple(float(s) for s in self.scale_factors)
        if sf:
            if len(sf) != len(self.layout):
                raise ValidationError(
                    f"{len(sf)} scale factors for {len(self.layout)} layers in {self.model_id!r}"
                )
            if not all(s > 0 and math.isfinite(s) for s in sf):
                raise ValidationError(f"scale factors of {self.model_id!r} must be positive and finite")
        object.__setattr__(self, "scale_factors", sf)

    @property
    def normalized(self) -> bool:
        return bool(self.scale_factors)

    @property
    def delta_hash(self) -> str:
        return content_hash(self.values)

    def replace(self, **changes) -> "DeltaRecord":
        fields = dict(
            model_id=self.model_id,
            values=self.values,
            layout=self.layout,
            scale_factors=self.scale_factors,
            orthogonalized=self.orthogonalized,
            source_hash=self.source_hash,
        )
        fields.update(changes)
        return DeltaRecord(**fields)


def check_layouts(a: LayerLayout, b: LayerLayout, what: str = "layouts") -> None:
    if a != b:
        raise LayoutMismatchError(f"{what} differ")


# ---------------------------------------------------------------------------
# checkpoints


@dataclass(eq=False)
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        tensors = {}
        for name, arr in self.tensors.items():
            arr = np.asarray(arr)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float64)
            tensors[str(name)] = arr
        self.tensors = tensors
        self.metadata = {str(k): str(v) for k, v in self.metadata.items()}

    def validate(self) -> None:
        for name, arr in self.tensors.items():
            if not np.all(np.isfinite(arr)):
                raise NonFiniteError(f"layer {name!r} contains non-finite values", layer=name)


def _encode_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    """Serialize; see the README for the byte layout."""
    ckpt.validate()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(ckpt.tensors)))
    blocks = []
    for name, arr in ckpt.tensors.items():
        dtype = arr.dtype.newbyteorder("<")
        code = _DTYPE_CODES[dtype]
        buf.write(_encode_str(name))
        buf.write(struct.pack("<BB", code, arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<Q", dim))
        blocks.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    buf.write(struct.pack("<I", len(ckpt.metadata)))
    for key, value in ckpt.metadata.items():
        buf.write(_encode_str(key))
        buf.write(_encode_str(value))
    for block in blocks:
        buf.write(block)
    body = buf.getvalue()
    return body + struct.pack("<Q", fnv1a64(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"file truncated at byte {self.pos} (needed {n} more)")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"invalid UTF-8 string: {exc}") from None


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    if len(data) < 4 or data[:4] != MAGIC:
        raise CheckpointFormatError("bad magic bytes: not an MDMC checkpoint")
    if len(data) < 4 + 8 + 8:
        raise TruncatedFileError("file too short for header and checksum")
    r = _Reader(data[:-8])
    r.take(4)
    version, count = r.unpack("<II")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    headers = []
    for _ in range(count):
        name = r.string()
        code, rank = r.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise CheckpointFormatError(f"layer {name!r}: unknown dtype code {code}")
        shape = r.unpack(f"<{rank}Q") if rank else ()
        headers.append((name, _CODE_DTYPES[code], tuple(shape)))
    (meta_count,) = r.unpack("<I")
    metadata = {}
    for _ in range(meta_count):
        key = r.string()
        metadata[key] = r.string()
    tensors = {}
    for name, dtype, shape in headers:
        n = math.prod(shape)
        raw = r.take(n * dtype.itemsize)
        arr = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"layer {name!r} contains non-finite values", layer=name)
        tensors[name] = arr
    if r.pos != len(r.data):
        raise ShapeError(
            f"{len(r.data) - r.pos} unexpected trailing bytes: layer data does not match header shapes"
        )
    (stored,) = struct.unpack("<Q", data[-8:])
    if stored != fnv1a64(data[:-8]):
        raise IntegrityError("checkpoint checksum mismatch")
    return Checkpoint(tensors, metadata)


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    atomic_write_bytes(path, checkpoint_to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# flat views


def flatten(ckpt: Checkpoint) -> ParameterVector:
    ckpt.validate()
    layout = LayerLayout.from_shapes({k: v.shape for k, v in ckpt.tensors.items()})
    parts = [np.asarray(ckpt.tensors[e.name], dtype=np.float64).reshape(-1) for e in layout]
    values = np.concatenate(parts) if parts else np.zeros(0)
    return ParameterVector(values, layout)


def unflatten(vec: ParameterVector | DeltaRecord, metadata=None) -> Checkpoint:
    tensors = {
        e.name: vec.values[e.offset : e.offset + e.length].reshape(e.shape).copy() for e in vec.layout
    }
    return Checkpoint(tensors, dict(metadata or {}))


# ---------------------------------------------------------------------------
# deltas


def extract_delta(theta_i: ParameterVector, theta_base: ParameterVector, model_id: str, source_hash: str = "") -> DeltaRecord:
    check_layouts(theta_i.layout, theta_base.layout, "model and base layouts")
    return DeltaRecord(
        model_id=model_id,
        values=theta_i.values - theta_base.values,
        layout=theta_i.layout,
        source_hash=source_hash or content_hash(theta_i.values),
    )


def normalize_delta(d: DeltaRecord, eps_scale: float = EPS_SCALE) -> DeltaRecord:
    """Divide each layer slice by its RMS so no layer dominates inner products."""
    if d.normalized:
        raise ValidationError(f"delta {d.model_id!r} is already normalized")
    values = d.values.copy()
    factors = []
    for e in d.layout:
        seg = values[e.offset : e.offset + e.length]
        rms = math.sqrt(float(np.sum(seg * seg)) / e.length) if e.length else 0.0
        if rms < eps_scale:
            factors.append(1.0)
        else:
            seg /= rms
            factors.append(rms)
    return d.replace(values=values, scale_factors=tuple(factors))


def denormalize_delta(d: DeltaRecord) -> DeltaRecord:
    if not d.normalized:
        raise ValidationError(f"delta {d.model_id!r} has no scale factors")
    values = d.values.copy()
    for e, s in zip(d.layout, d.scale_factors):
        values[e.offset : e.offset + e.length] *= s
    return d.replace(values=values, scale_factors=())


def delta_to_checkpoint(d: DeltaRecord) -> Checkpoint:
    meta = {
        "kind": "delta",
        "model_id": d.model_id,
        "orthogonalized": "1" if d.orthogonalized else "0",
        "source_hash": d.source_hash,
        "scale_factors": ",".join(repr(s) for s in d.scale_factors),
    }
    return unflatten(d, meta)


def delta_from_checkpoint(ckpt: Checkpoint) -> DeltaRecord:
    meta = ckpt.metadata
    if meta.get("kind") != "delta":
        raise CheckpointFormatError("checkpoint does not hold a delta record")
    vec = flatten(ckpt)
    sf = tuple(float(s) for s in meta.get("scale_factors", "").split(",") if s)
    return DeltaRecord(
        model_id=meta["model_id"],
        values=vec.values,
        layout=vec.layout,
        scale_factors=sf,
        orthogonalized=meta.get("orthogonalized") == "1",
        source_hash=meta.get("source_hash", ""),
    )


def save_delta(d: DeltaRecord, path) -> None:
    save_checkpoint(delta_to_checkpoint(d), path)


def load_delta(path) -> DeltaRecord:
    return delta_from_checkpoint(load_checkpoint(path))


# ---------------------------------------------------------------------------
# vector algebra


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch: {a.shape} vs {b.shape}")
    return a, b


def accurate_sum(a) -> float:
    # numpy reduces contiguous float64 arrays pairwise: O(log n) error growth
    return float(np.sum(np.ascontiguousarray(a, dtype=np.float64)))


def inner_product(a, b) -> float:
    a, b = _pair(a, b)
    return accurate_sum(a * b)


def norm(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    return math.sqrt(accurate_sum(a * a))


def add_scaled(dst, src, c: float) -> np.ndarray:
    dst, src = _pair(dst, src)
    return dst + c * src
