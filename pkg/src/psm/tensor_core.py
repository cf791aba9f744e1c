"""Dense float64 matrix primitives with a fixed evaluation order.

Matrices are plain 2-D ``numpy.float64`` arrays. numpy is only used for
storage and for correctly-rounded elementwise arithmetic; every reduction
(matmul, row sums) is evaluated left to right so that a given row of a
result has the same bits no matter how many other rows or trailing masked
columns the call carried. ``exp`` and ``tanh`` go through libm one scalar
at a time for the same reason (SIMD kernels may round differently
depending on where an element lands in a vector lane).
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "NonFiniteError",
    "WeightFileError",
    "WeightFileMissing",
    "CorruptWeightFile",
    "BadMagic",
    "ManifestMismatch",
    "WeightBundle",
    "as_matrix",
    "matmul",
    "row_sum",
    "softmax_rows",
    "causal_attention",
    "elementwise",
    "exp_map",
    "tanh_map",
    "seeded_init",
    "splitmix64",
    "save_weights",
    "load_weights",
]

MAGIC = b"PSMW"
FORMAT_VERSION = 1
_SEED_ENTRY = "__seed__"


class DimensionError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


class WeightFileError(Exception):
    """Base class for weight-file failures."""


class WeightFileMissing(WeightFileError, FileNotFoundError):
    pass


class CorruptWeightFile(WeightFileError):
    pass


class BadMagic(WeightFileError):
    pass


class ManifestMismatch(WeightFileError):
    pass


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce ``x`` to a finite, C-contiguous float64 matrix."""
    m = np.ascontiguousarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise DimensionError(f"{name}: expected 2-D, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise NonFiniteError(f"{name}: non-finite entries")
    return m


def matmul(a, b) -> np.ndarray:
    """Matrix product accumulated strictly left to right over the inner index.

    Bitwise identical to ``acc = 0.0; for k: acc += a[i, k] * b[k, j]``.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} x {b.shape}")
    m, inner = a.shape
    n = b.shape[1]
    if inner == 0:
        return np.zeros((m, n))
    products = a[:, :, None] * b[None, :, :]
    acc = np.add.accumulate(products, axis=1)[:, -1, :]
    # +0.0 maps a leading -0.0 to +0.0, matching an accumulator seeded with 0.0
    return acc + 0.0


def row_sum(m: np.ndarray) -> np.ndarray:
    """Left-to-right sum of each row, as a column vector."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape[1] == 0:
        return np.zeros((m.shape[0], 1))
    return np.add.accumulate(m, axis=1)[:, -1:] + 0.0


def _scalar_map(fn, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.array(list(map(fn, x.ravel().tolist())), dtype=np.float64).reshape(x.shape)


def exp_map(x: np.ndarray) -> np.ndarray:
    return _scalar_map(math.exp, x)


def tanh_map(x: np.ndarray) -> np.ndarray:
    return _scalar_map(math.tanh, x)


def softmax_rows(m, causal: bool = False) -> np.ndarray:
    """Row-wise softmax with max subtraction.

    With ``causal`` set, entry ``(i, j)`` for ``j > i`` is masked to exactly 0.
    A row with no admissible position raises ``DimensionError``.
    """
    m = as_matrix(m, "scores")
    rows, cols = m.shape
    if cols == 0:
        raise DimensionError("softmax_rows: row with no admissible positions")
    x = m.copy()
    if causal:
        x[np.triu_indices(rows, k=1, m=cols)] = -np.inf
    row_max = x.max(axis=1, keepdims=True)
    e = exp_map(x - row_max)
    return e / row_sum(e)


def causal_attention(q, k, v, head_dim: int) -> np.ndarray:
    """Single-head causal softmax attention, scores scaled by ``1/sqrt(head_dim)``."""
    q = as_matrix(q, "q")
    k = as_matrix(k, "k")
    v = as_matrix(v, "v")
    if q.shape[1] != head_dim or k.shape[1] != head_dim:
        raise DimensionError(f"causal_attention: q {q.shape}, k {k.shape}, head_dim {head_dim}")
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"causal_attention: k {k.shape} vs v {v.shape}")
    scores = matmul(q, k.T) * (1.0 / math.sqrt(head_dim))
    return matmul(softmax_rows(scores, causal=True), v)


def elementwise(kind: str, a, b=None) -> np.ndarray:
    """Pointwise ``add``, ``hadamard``, ``scale`` (``b`` is a float) or ``exp_neg``."""
    a = as_matrix(a, "a")
    if kind == "exp_neg":
        return exp_map(-a)
    if kind == "scale":
        return a * float(b)
    b = as_matrix(b, "b")
    if a.shape != b.shape:
        raise DimensionError(f"{kind}: {a.shape} vs {b.shape}")
    if kind == "add":
        return a + b
    if kind == "hadamard":
        return a * b
    raise ValueError(f"unknown elementwise kind {kind!r}")


_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def splitmix64(seed: int, count: int) -> np.ndarray:
    """First ``count`` outputs of SplitMix64 (Steele, Lea & Flood 2014) seeded with ``seed``."""
    with np.errstate(over="ignore"):
        state = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        z = state + _GOLDEN * np.arange(1, count + 1, dtype=np.uint64)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    return z & _MASK64


def seeded_init(shape: Sequence[int], seed: int, scale: float) -> np.ndarray:
    """Uniform entries in ``[-scale, scale)`` from SplitMix64.

    Same ``(shape, seed, scale)`` gives the same bits on every platform.
    """
    rows, cols = (int(s) for s in shape)
    bits = splitmix64(seed, rows * cols)
    unit = (bits >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
    return ((2.0 * unit - 1.0) * float(scale) + 0.0).reshape(rows, cols)


@dataclass
class WeightBundle:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    seed: int | None = None

    def __post_init__(self):
        self.tensors = {name: as_matrix(t, name) for name, t in self.tensors.items()}
        if _SEED_ENTRY in self.tensors:
            raise ValueError(f"{_SEED_ENTRY!r} is reserved")

    @property
    def manifest(self) -> dict[str, tuple[int, int]]:
        return {name: t.shape for name, t in self.tensors.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.tensors[name]
        except KeyError:
            raise KeyError(f"missing weight {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __len__(self) -> int:
        return len(self.tensors)

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def bitwise_equal(self, other: "WeightBundle") -> bool:
        if self.seed != other.seed or self.manifest != other.manifest:
            return False
        return all(self.tensors[k].tobytes() == other.tensors[k].tobytes() for k in self.tensors)


def save_weights(w: WeightBundle, path) -> None:
    """Write ``w`` in the PSMW little-endian layout with a trailing CRC32."""
    entries = list(w.tensors.items())
    if w.seed is not None:
        if abs(w.seed) > 2**53:
            raise ValueError("seed does not fit exactly in f64")
        entries.append((_SEED_ENTRY, np.array([[float(w.seed)]])))
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(entries))]
    for name, t in entries:
        raw = name.encode("utf-8")
        rows, cols = t.shape
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<II", rows, cols))
        parts.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def load_weights(path, manifest: Mapping[str, tuple[int, int]] | None = None) -> WeightBundle:
    """Read a PSMW file; optionally check names and shapes against ``manifest``."""
    p = Path(path)
    if not p.exists():
        raise WeightFileMissing(str(p))
    data = p.read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic(f"{p}: not a PSMW file")
    if len(data) < 16:
        raise CorruptWeightFile(f"{p}: truncated header")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CorruptWeightFile(f"{p}: CRC mismatch")
    version, count = struct.unpack_from("<II", body, 4)
    if version != FORMAT_VERSION:
        raise CorruptWeightFile(f"{p}: unsupported version {version}")
    off = 12
    tensors: dict[str, np.ndarray] = {}
    seed = None
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", body, off)
            off += 4
            name = body[off:off + nlen].decode("utf-8")
            if len(name.encode("utf-8")) != nlen:
                raise CorruptWeightFile(f"{p}: truncated name")
            off += nlen
            rows, cols = struct.unpack_from("<II", body, off)
            off += 8
            nbytes = rows * cols * 8
            if off + nbytes > len(body):
                raise CorruptWeightFile(f"{p}: truncated tensor {name!r}")
            t = np.frombuffer(body, dtype="<f8", count=rows * cols, offset=off).astype(np.float64).reshape(rows, cols)
            off += nbytes
            if name in tensors:
                raise CorruptWeightFile(f"{p}: duplicate entry {name!r}")
            if name == _SEED_ENTRY:
                seed = int(t[0, 0])
            else:
                tensors[name] = t
    except struct.error as exc:
        raise CorruptWeightFile(f"{p}: truncated ({exc})") from None
    if off != len(body):
        raise CorruptWeightFile(f"{p}: {len(body) - off} trailing bytes")
    if manifest is not None:
        got = {k: v.shape for k, v in tensors.items()}
        want = {k: tuple(v) for k, v in manifest.items()}
        if got != want:
            raise ManifestMismatch(f"{p}: manifest mismatch")
    return WeightBundle(tensors, seed=seed)
