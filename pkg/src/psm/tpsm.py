"""Transformer-PSM: attention encoder, aggregator and inference head over chunks.

Every module is a stack of pre-norm causal attention blocks built on
:mod:`psm.tensor_core`, so a row of any block output depends on the earlier
rows only, with the same bits whatever the window length. That is what lets
:func:`psm_decode_stream` (one token at a time, binary-counter scan) match
:func:`psm_forward_static` (whole sequence, tree scan) exactly.

Window-local positions: the aggregator window is ``[older; newer]`` at
positions ``0..2c-1``; the inference window is ``[state; chunk]`` with the
state at ``0..c-1`` and the chunk always at ``c..2c-1``, also when there is
no state yet.
"""

from __future__ import annotations

import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .scan_engine import IDENTITY, Aggregator, OnlineScanner, ScanTrace, scan_static
from .tensor_core import (
    DimensionError,
    WeightBundle,
    causal_attention,
    matmul,
    row_sum,
    seeded_init,
    tanh_map,
)

__all__ = [
    "PsmConfig",
    "COMPRESSIONS",
    "weight_manifest",
    "init_weights",
    "zero_weights",
    "encode_chunk",
    "agg_attention",
    "psm_aggregator",
    "infer_chunk",
    "chunk_prefixes",
    "psm_forward_static",
    "PsmDecoder",
    "psm_decode_stream",
    "export_logits",
]

COMPRESSIONS = ("drop-first-half", "linear-projection")
_BLOCK_PARAMS = ("ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")


@dataclass(frozen=True)
class PsmConfig:
    chunk_size: int
    model_dim: int
    heads: int = 1
    agg_layers: int = 1
    inf_layers: int = 1
    vocab_size: int = 64
    compression: str = "drop-first-half"
    mlp_ratio: int = 4
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        if self.model_dim < 1 or self.heads < 1 or self.model_dim % self.heads:
            raise ValueError("model_dim must be a positive multiple of heads")
        if self.agg_layers < 1 or self.inf_layers < 1:
            raise ValueError("layer counts must be >= 1")
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")
        if self.compression not in COMPRESSIONS:
            raise ValueError(f"compression must be one of {COMPRESSIONS}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads


def _block_manifest(prefix: str, d: int, hidden: int) -> dict[str, tuple[int, int]]:
    shapes = {
        "ln1_g": (1, d), "ln1_b": (1, d),
        "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
        "ln2_g": (1, d), "ln2_b": (1, d),
        "w1": (d, hidden), "b1": (1, hidden), "w2": (hidden, d), "b2": (1, d),
    }
    return {prefix + k: shapes[k] for k in _BLOCK_PARAMS}


def weight_manifest(cfg: PsmConfig) -> dict[str, tuple[int, int]]:
    """Parameter names and shapes, grouped by ``enc.``, ``agg.`` and ``inf.``."""
    c, d, v = cfg.chunk_size, cfg.model_dim, cfg.vocab_size
    hidden = cfg.mlp_ratio * d
    m = {"enc.tok_emb": (v, d), "enc.pos_emb": (c, d)}
    m.update(_block_manifest("enc.block0.", d, hidden))
    m["agg.pos_emb"] = (2 * c, d)
    for layer in range(cfg.agg_layers):
        m.update(_block_manifest(f"agg.block{layer}.", d, hidden))
    if cfg.compression == "linear-projection":
        m["agg.compress"] = (c, 2 * c)
    m["inf.tok_emb"] = (v, d)
    m["inf.pos_emb"] = (2 * c, d)
    for layer in range(cfg.inf_layers):
        m.update(_block_manifest(f"inf.block{layer}.", d, hidden))
    m["inf.lnf_g"] = (1, d)
    m["inf.lnf_b"] = (1, d)
    m["inf.readout"] = (d, v)
    return m


def init_weights(cfg: PsmConfig, seed: int) -> WeightBundle:
    """Seeded random weights; layer-norm gains start at 1 and biases at 0."""
    tensors = {}
    for name, shape in weight_manifest(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):
            tensors[name] = np.ones(shape)
        elif leaf.endswith("_b") or leaf in ("b1", "b2"):
            tensors[name] = np.zeros(shape)
        else:
            scale = 1.0 if leaf.endswith("_emb") else 1.0 / math.sqrt(shape[0])
            tensors[name] = seeded_init(shape, (seed << 32) ^ zlib.crc32(name.encode()), scale)
    return WeightBundle(tensors, seed=seed)


def zero_weights(cfg: PsmConfig) -> WeightBundle:
    return WeightBundle({name: np.zeros(shape) for name, shape in weight_manifest(cfg).items()})


def _layer_norm(h: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float) -> np.ndarray:
    d = h.shape[1]
    centered = h - row_sum(h) / d
    var = row_sum(centered * centered) / d
    return centered / np.sqrt(var + eps) * g + b


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + tanh_map(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x * x * x)))


def _block(h: np.ndarray, w: WeightBundle, prefix: str, cfg: PsmConfig) -> np.ndarray:
    p = lambda name: w[prefix + name]  # noqa: E731
    a = _layer_norm(h, p("ln1_g"), p("ln1_b"), cfg.ln_eps)
    q, k, v = matmul(a, p("wq")), matmul(a, p("wk")), matmul(a, p("wv"))
    hd = cfg.head_dim
    heads = [
        causal_attention(q[:, i * hd:(i + 1) * hd], k[:, i * hd:(i + 1) * hd], v[:, i * hd:(i + 1) * hd], hd)
        for i in range(cfg.heads)
    ]
    h = h + matmul(np.hstack(heads), p("wo"))
    m = _layer_norm(h, p("ln2_g"), p("ln2_b"), cfg.ln_eps)
    return h + (matmul(_gelu(matmul(m, p("w1")) + p("b1")), p("w2")) + p("b2"))


def _check_ids(ids: Sequence[int], cfg: PsmConfig) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64).ravel()
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ValueError(f"token ids must lie in [0, {cfg.vocab_size})")
    return ids


def _check_state(s: np.ndarray, cfg: PsmConfig, what: str = "state") -> None:
    if np.shape(s) != (cfg.chunk_size, cfg.model_dim):
        raise DimensionError(f"{what}: expected {(cfg.chunk_size, cfg.model_dim)}, got {np.shape(s)}")


def encode_chunk(tokens: Sequence[int], weights: WeightBundle, cfg: PsmConfig) -> np.ndarray:
    """Embed one chunk and run one causal block over it; returns ``c x d``."""
    ids = _check_ids(tokens, cfg)
    if ids.size != cfg.chunk_size:
        raise ValueError(f"chunk must have {cfg.chunk_size} tokens, got {ids.size}")
    h = weights["enc.tok_emb"][ids] + weights["enc.pos_emb"]
    return _block(h, weights, "enc.block0.", cfg)


def agg_attention(s: np.ndarray, x: np.ndarray, weights: WeightBundle, cfg: PsmConfig) -> np.ndarray:
    """Attend causally over ``[s; x]`` for ``agg_layers`` blocks and compress back to ``c x d``.

    Not associative. The scan engine handles the identity, so both operands
    must be real chunk states here.
    """
    if s is IDENTITY or x is IDENTITY:
        raise ValueError("agg_attention does not take IDENTITY; combine through an Aggregator")
    _check_state(s, cfg, "older state")
    _check_state(x, cfg, "newer state")
    c = cfg.chunk_size
    h = np.vstack([s, x]) + weights["agg.pos_emb"]
    for layer in range(cfg.agg_layers):
        h = _block(h, weights, f"agg.block{layer}.", cfg)
    if cfg.compression == "drop-first-half":
        return h[c:].copy()
    return matmul(weights["agg.compress"], h)


def psm_aggregator(weights: WeightBundle, cfg: PsmConfig) -> Aggregator:
    return Aggregator(lambda s, x: agg_attention(s, x, weights, cfg), claims_associative=False, name="tpsm-attention")


def _infer_window(s, ids: np.ndarray, weights: WeightBundle, cfg: PsmConfig) -> np.ndarray:
    c = cfg.chunk_size
    m = ids.size
    pos = weights["inf.pos_emb"]
    h = weights["inf.tok_emb"][ids] + pos[c:c + m]
    if s is not IDENTITY:
        _check_state(s, cfg)
        h = np.vstack([s + pos[:c], h])
    for layer in range(cfg.inf_layers):
        h = _block(h, weights, f"inf.block{layer}.", cfg)
    out = _layer_norm(h[h.shape[0] - m:], weights["inf.lnf_g"], weights["inf.lnf_b"], cfg.ln_eps)
    return matmul(out, weights["inf.readout"])


def infer_chunk(s, tokens: Sequence[int], weights: WeightBundle, cfg: PsmConfig) -> np.ndarray:
    """Logits (``c x vocab``) for one chunk given the prefix state ``s`` (or ``IDENTITY``)."""
    ids = _check_ids(tokens, cfg)
    if ids.size != cfg.chunk_size:
        raise DimensionError(f"chunk must have {cfg.chunk_size} tokens, got {ids.size}")
    return _infer_window(s, ids, weights, cfg)


def _map(fn, items, workers):
    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def chunk_prefixes(xs: Sequence, agg: Aggregator, path: str = "static", pad=None, workers: int | None = None) -> list:
    """Exclusive prefix state for every chunk: ``IDENTITY`` for chunk 0, then ``x_0``, ``x_0:1``, ...

    ``static`` right-pads to a power of two with ``pad`` (never read back);
    ``online`` takes the emission after each chunk.
    """
    r = len(xs)
    if path == "static":
        size = 1 << (r - 1).bit_length()
        padded = list(xs) + [pad] * (size - r)
        return scan_static(padded, agg, workers=workers)[:r]
    if path == "online":
        scanner = OnlineScanner(agg, record=False)
        return [IDENTITY] + [scanner.push(x) for x in xs[:-1]]
    raise ValueError(f"unknown scan path {path!r}")


def psm_forward_static(tokens: Sequence[int], weights: WeightBundle, cfg: PsmConfig, workers: int | None = None) -> np.ndarray:
    """Training-path evaluation: encode all chunks, tree-scan, infer each chunk.

    The chunk count is padded on the right to a power of two with zero
    states; their prefixes are never read.
    """
    ids = _check_ids(tokens, cfg)
    c = cfg.chunk_size
    if ids.size == 0 or ids.size % c:
        raise ValueError(f"token count {ids.size} must be a positive multiple of chunk size {c}")
    r = ids.size // c
    chunks = [ids[i * c:(i + 1) * c] for i in range(r)]
    xs = _map(lambda ch: encode_chunk(ch, weights, cfg), chunks, workers)
    pad = np.zeros((c, cfg.model_dim))
    prefixes = chunk_prefixes(xs, psm_aggregator(weights, cfg), "static", pad=pad, workers=workers)
    logits = _map(lambda i: infer_chunk(prefixes[i], chunks[i], weights, cfg), range(r), workers)
    return np.vstack(logits)


class PsmDecoder:
    """Token-at-a-time decoder holding the counter roots and the open chunk."""

    def __init__(self, weights: WeightBundle, cfg: PsmConfig, record: bool = True):
        self.weights = weights
        self.cfg = cfg
        self.scanner = OnlineScanner(psm_aggregator(weights, cfg), record=record)
        self.state = IDENTITY
        self.buffer: list[int] = []

    @property
    def trace(self) -> ScanTrace:
        return self.scanner.trace

    @property
    def live_states(self) -> int:
        """Chunk-sized buffers held: occupied roots plus the open chunk."""
        return self.scanner.occupied + 1

    def feed(self, token: int) -> np.ndarray:
        """Logits for ``token``'s position; refreshes the state when a chunk closes."""
        ids = _check_ids([token], self.cfg)
        self.buffer.append(int(ids[0]))
        logits = _infer_window(self.state, np.asarray(self.buffer, dtype=np.int64), self.weights, self.cfg)[-1]
        if len(self.buffer) == self.cfg.chunk_size:
            x = encode_chunk(self.buffer, self.weights, self.cfg)
            self.state = self.scanner.push(x)
            self.buffer = []
        return logits


def psm_decode_stream(tokens: Iterable[int], weights: WeightBundle, cfg: PsmConfig):
    """Stream ``tokens`` through a :class:`PsmDecoder`; returns ``(logits, trace)``."""
    dec = PsmDecoder(weights, cfg)
    rows = [dec.feed(t) for t in tokens]
    logits = np.vstack(rows) if rows else np.zeros((0, cfg.vocab_size))
    return logits, dec.trace


def export_logits(logits: np.ndarray, path, fmt: str = "csv") -> None:
    """Write ``n x vocab`` logits as CSV (``repr`` precision) or raw row-major little-endian f64."""
    logits = np.asarray(logits, dtype=np.float64)
    if fmt == "bin":
        Path(path).write_bytes(np.ascontiguousarray(logits, dtype="<f8").tobytes())
    elif fmt == "csv":
        lines = [",".join(repr(float(v)) for v in row) for row in logits]
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))
    else:
        raise ValueError(f"unknown format {fmt!r}")
