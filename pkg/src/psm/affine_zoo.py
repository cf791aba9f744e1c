"""Affine state updates ``s_t = E_t ▶ s_{t-1} + f_t`` and ten layers that use them.

A state is a ``d_v x d_k`` matrix. The transition ``E`` is one of

* ``SCALAR``: a float, acting by scaling;
* ``DIAG``: an array broadcastable against the state (``(d_v, 1)`` gates
  rows, ``(1, d_k)`` gates columns), acting pointwise;
* ``FULL_LEFT``: a square matrix acting as ``E @ s``;
* ``FULL_RIGHT``: a square matrix acting as ``s @ E`` (the DeltaNet form).

Pairs compose with ``(E2, f2) ⊕ (E1, f1) = (E2 ∘ E1, f2 + E2 ▶ f1)``, an
associative operator with identity ``(I, 0)``.
"""

from __future__ import annotations

import enum
import math
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .scan_engine import Aggregator, scan_online, scan_static
from .tensor_core import DimensionError, WeightBundle, matmul, seeded_init

__all__ = [
    "EKind",
    "AffinePair",
    "LayerKind",
    "LAYER_SPELLINGS",
    "NORMALIZED_KINDS",
    "affine_combine",
    "affine_aggregator",
    "identity_pair",
    "sequential_affine",
    "make_layer_pairs",
    "layer_weight_manifest",
    "init_layer_weights",
    "random_tokens",
    "layer_states_via_scan",
    "scan_pair_states",
    "readout",
    "lti_pairs",
    "lti_prefix_closed_form",
    "max_relative_error",
]

NORMALIZER_EPS = 1e-9


class EKind(enum.Enum):
    SCALAR = "scalar"
    DIAG = "diag"
    FULL_LEFT = "full_left"
    FULL_RIGHT = "full_right"


@dataclass(frozen=True)
class AffinePair:
    E: object
    f: np.ndarray
    kind: EKind


class LayerKind(enum.Enum):
    LINEAR_ATTENTION = "linear-attention"
    DELTANET = "deltanet"
    GATED_DELTANET = "gated-deltanet"
    RETNET = "retnet"
    MAMBA2 = "mamba2"
    MLSTM = "mlstm"
    GATED_RFA = "gated-rfa"
    S4 = "s4"
    MAMBA = "mamba"
    GLA = "gla"

    @classmethod
    def parse(cls, name: str) -> "LayerKind":
        try:
            return cls(name)
        except ValueError:
            raise ValueError(f"unknown layer kind {name!r}; expected one of {LAYER_SPELLINGS}") from None


LAYER_SPELLINGS = tuple(k.value for k in LayerKind)
# kinds whose state carries an extra normalizer row
NORMALIZED_KINDS = frozenset({LayerKind.LINEAR_ATTENTION, LayerKind.MLSTM})


def _check_compatible(p2: AffinePair, p1: AffinePair) -> None:
    if p2.kind is not p1.kind:
        raise DimensionError(f"E kinds differ: {p2.kind} vs {p1.kind}")
    if p2.f.shape != p1.f.shape:
        raise DimensionError(f"state shapes differ: {p2.f.shape} vs {p1.f.shape}")
    if p2.kind is not EKind.SCALAR and np.shape(p2.E) != np.shape(p1.E):
        raise DimensionError(f"E shapes differ: {np.shape(p2.E)} vs {np.shape(p1.E)}")


def affine_combine(p2: AffinePair, p1: AffinePair) -> AffinePair:
    """``p2 ⊕ p1``: apply ``p1`` first, then ``p2``."""
    _check_compatible(p2, p1)
    kind = p2.kind
    if kind is EKind.SCALAR:
        return AffinePair(p2.E * p1.E, p2.f + p2.E * p1.f, kind)
    if kind is EKind.DIAG:
        return AffinePair(p2.E * p1.E, p2.f + p2.E * p1.f, kind)
    if kind is EKind.FULL_LEFT:
        return AffinePair(matmul(p2.E, p1.E), p2.f + matmul(p2.E, p1.f), kind)
    # right action: (s @ E1) @ E2 = s @ (E1 @ E2)
    return AffinePair(matmul(p1.E, p2.E), p2.f + matmul(p1.f, p2.E), kind)


def affine_aggregator() -> Aggregator:
    """Scan operator on pairs; the scan passes the older element first."""
    return Aggregator(lambda older, newer: affine_combine(newer, older), claims_associative=True, name="affine")


def identity_pair(like: AffinePair) -> AffinePair:
    """``(I, 0)`` with the same kind and shapes as ``like``."""
    f = np.zeros_like(like.f)
    if like.kind is EKind.SCALAR:
        return AffinePair(1.0, f, like.kind)
    if like.kind is EKind.DIAG:
        return AffinePair(np.ones_like(like.E), f, like.kind)
    return AffinePair(np.eye(like.E.shape[0]), f, like.kind)


def _act(p: AffinePair, s: np.ndarray) -> np.ndarray:
    if p.kind in (EKind.SCALAR, EKind.DIAG):
        return p.E * s
    if p.kind is EKind.FULL_LEFT:
        return matmul(p.E, s)
    return matmul(s, p.E)


def sequential_affine(pairs: Sequence[AffinePair]) -> list[np.ndarray]:
    """States ``s_0 .. s_{T-1}`` of the left-to-right recurrence from ``s_{-1} = 0``."""
    if not pairs:
        return []
    shape, kind = pairs[0].f.shape, pairs[0].kind
    s = np.zeros(shape)
    states = []
    for p in pairs:
        if p.f.shape != shape or p.kind is not kind:
            raise DimensionError("pairs must share kind and state shape")
        s = _act(p, s) + p.f
        states.append(s)
    return states


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def _gate_names(kind: LayerKind) -> dict[str, int]:
    """Gate projections per kind: name -> output width (``d`` stands for model dim)."""
    return {
        LayerKind.LINEAR_ATTENTION: {},
        LayerKind.DELTANET: {"w_beta": 1},
        LayerKind.GATED_DELTANET: {"w_beta": 1, "w_alpha": 1},
        LayerKind.RETNET: {},
        LayerKind.MAMBA2: {"w_gamma": 1},
        LayerKind.MLSTM: {"w_forget": 1, "w_input": 1},
        LayerKind.GATED_RFA: {"w_g": 1},
        LayerKind.S4: {"w_alpha": -1},
        LayerKind.MAMBA: {"w_alpha": -1},
        LayerKind.GLA: {"w_alpha": -1},
    }[kind]


def layer_weight_manifest(kind: LayerKind, dim: int) -> dict[str, tuple[int, int]]:
    manifest = {"W_k": (dim, dim), "W_v": (dim, dim), "W_q": (dim, dim)}
    for name, width in _gate_names(kind).items():
        manifest[name] = (dim, dim if width == -1 else width)
        manifest[name.replace("w_", "b_")] = (1, dim if width == -1 else width)
    if kind is LayerKind.S4:
        manifest["B"] = (dim, dim)
    return manifest


def _name_seed(seed: int, name: str) -> int:
    return (seed * 0x100000001B3) ^ zlib.crc32(name.encode())


def init_layer_weights(kind: LayerKind, dim: int, seed: int) -> WeightBundle:
    """Seeded random weights for ``kind`` with model, key and value width ``dim``."""
    tensors = {}
    for name, shape in layer_weight_manifest(kind, dim).items():
        scale = 0.5 if name.startswith("b_") else 1.0 / math.sqrt(dim)
        tensors[name] = seeded_init(shape, _name_seed(seed, name), scale)
    return WeightBundle(tensors, seed=seed)


def random_tokens(n: int, dim: int, seed: int) -> np.ndarray:
    return seeded_init((n, dim), _name_seed(seed, "tokens"), 1.0)


def _project(x: np.ndarray, weights: WeightBundle, name: str) -> np.ndarray:
    return x @ weights[name]


def _gate(x: np.ndarray, weights: WeightBundle, name: str, overrides=None) -> np.ndarray:
    if overrides and name[2:] in overrides:
        width = weights[name].shape[1]
        return np.full((x.shape[0], width), float(overrides[name[2:]]))
    return _sigmoid(x @ weights[name] + weights[name.replace("w_", "b_")])


def make_layer_pairs(
    kind: LayerKind,
    inputs: np.ndarray,
    weights: WeightBundle,
    *,
    retnet_gamma: float = 0.9,
    gate_overrides: dict[str, float] | None = None,
) -> list[AffinePair]:
    """Per-token ``(E_t, f_t)`` for one of the ten layer kinds.

    ``inputs`` is ``T x d``. Keys and values are linear projections of the
    token, gates are sigmoid projections. DeltaNet keys are L2-normalised so
    ``I - beta k k^T`` stays contractive. ``gate_overrides`` pins a gate
    (``{"beta": 0.0}``) to a constant instead of its projection. For linear attention and mLSTM the
    state gets one extra row holding the normaliser, updated by the same
    transition, so their state is ``(d + 1) x d``.
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError("inputs must be T x d")
    for name in layer_weight_manifest(kind, x.shape[1]):
        if name not in weights:
            raise KeyError(f"missing weight {name!r} for {kind.value}")
    k = _project(x, weights, "W_k")
    v = _project(x, weights, "W_v")
    d_k = k.shape[1]
    pairs = []
    for t in range(x.shape[0]):
        kt = k[t][None, :]
        vt = v[t][:, None]
        xt = x[t:t + 1]
        outer = vt @ kt
        if kind is LayerKind.LINEAR_ATTENTION:
            f = np.vstack([vt, [[1.0]]]) @ kt
            pairs.append(AffinePair(1.0, f, EKind.SCALAR))
        elif kind in (LayerKind.DELTANET, LayerKind.GATED_DELTANET):
            norm = np.linalg.norm(kt)
            kn = kt / norm if norm > 0 else kt
            beta = float(_gate(xt, weights, "w_beta", gate_overrides)[0, 0])
            E = np.eye(d_k) - beta * (kn.T @ kn)
            if kind is LayerKind.GATED_DELTANET:
                E = float(_gate(xt, weights, "w_alpha", gate_overrides)[0, 0]) * E
            pairs.append(AffinePair(E, beta * (vt @ kn), EKind.FULL_RIGHT))
        elif kind is LayerKind.RETNET:
            pairs.append(AffinePair(float(retnet_gamma), outer, EKind.SCALAR))
        elif kind is LayerKind.MAMBA2:
            gamma = float(_gate(xt, weights, "w_gamma", gate_overrides)[0, 0])
            pairs.append(AffinePair(gamma, outer, EKind.SCALAR))
        elif kind is LayerKind.MLSTM:
            fg = float(_gate(xt, weights, "w_forget", gate_overrides)[0, 0])
            ig = float(_gate(xt, weights, "w_input", gate_overrides)[0, 0])
            f = ig * (np.vstack([vt, [[1.0]]]) @ kt)
            pairs.append(AffinePair(fg, f, EKind.SCALAR))
        elif kind is LayerKind.GATED_RFA:
            g = float(_gate(xt, weights, "w_g", gate_overrides)[0, 0])
            pairs.append(AffinePair(g, (1.0 - g) * outer, EKind.SCALAR))
        elif kind is LayerKind.S4:
            alpha = _gate(xt, weights, "w_alpha", gate_overrides).T
            f = weights["B"] * (vt @ np.ones((1, d_k)))
            pairs.append(AffinePair(np.exp(-alpha), f, EKind.DIAG))
        elif kind is LayerKind.MAMBA:
            alpha = _gate(xt, weights, "w_alpha", gate_overrides).T
            pairs.append(AffinePair(np.exp(-alpha), (alpha * vt) @ kt, EKind.DIAG))
        elif kind is LayerKind.GLA:
            alpha = _gate(xt, weights, "w_alpha", gate_overrides)
            pairs.append(AffinePair(alpha, outer, EKind.DIAG))
        else:  # pragma: no cover
            raise ValueError(kind)
    return pairs


def layer_states_via_scan(
    kind: LayerKind,
    inputs: np.ndarray,
    weights: WeightBundle,
    path: str = "static",
    **kw,
) -> list[np.ndarray]:
    """Recurrent states read off the f-component of scanned prefixes."""
    pairs = make_layer_pairs(kind, inputs, weights, **kw)
    return scan_pair_states(pairs, path)


def scan_pair_states(pairs: Sequence[AffinePair], path: str = "static") -> list[np.ndarray]:
    if not pairs:
        return []
    agg = affine_aggregator()
    n = len(pairs)
    if path == "static":
        size = 1 << (n - 1).bit_length()
        padded = list(pairs) + [identity_pair(pairs[0])] * (size - n)
        prefixes, total = scan_static(padded, agg, with_total=True)
        inclusive = prefixes[1:] + [total]
        return [p.f for p in inclusive[:n]]
    if path == "online":
        emitted, _ = scan_online(pairs, agg, record=False)
        return [p.f for p in emitted]
    raise ValueError(f"unknown scan path {path!r}")


def readout(kind: LayerKind, state: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Layer output ``S q``; normalised kinds divide by the normaliser row.

    The normaliser keeps its sign; only its magnitude is floored at ``NORMALIZER_EPS``.
    """
    q = np.asarray(q, dtype=np.float64).reshape(-1, 1)
    if kind in NORMALIZED_KINDS:
        num = state[:-1] @ q
        den = float((state[-1:] @ q)[0, 0])
        if abs(den) < NORMALIZER_EPS:
            den = math.copysign(NORMALIZER_EPS, den)
        return (num / den).ravel()
    return (state @ q).ravel()


def lti_pairs(A: np.ndarray, B: np.ndarray, xs: Sequence[np.ndarray]) -> list[AffinePair]:
    """``(A, B x_k)`` for each input, as left-acting pairs with column-vector states."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    return [AffinePair(A, B @ np.asarray(x, dtype=np.float64).reshape(-1, 1), EKind.FULL_LEFT) for x in xs]


def lti_prefix_closed_form(A: np.ndarray, B: np.ndarray, xs: Sequence[np.ndarray], t: int) -> AffinePair:
    """``(A^t, sum_{k<t} A^(t-1-k) B x_k)``: the fold of the first ``t`` LTI pairs."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError(f"A must be square, got {A.shape}")
    if B.shape[0] != A.shape[0]:
        raise DimensionError(f"B rows {B.shape[0]} != state dim {A.shape[0]}")
    if not 1 <= t <= len(xs):
        raise ValueError(f"t must be in [1, {len(xs)}]")
    f = np.zeros((A.shape[0], 1))
    for k in range(t):
        x = np.asarray(xs[k], dtype=np.float64).reshape(-1, 1)
        if x.shape[0] != B.shape[1]:
            raise DimensionError(f"x_{k} has {x.shape[0]} entries, B takes {B.shape[1]}")
        f = f + np.linalg.matrix_power(A, t - 1 - k) @ (B @ x)
    return AffinePair(np.linalg.matrix_power(A, t), f, EKind.FULL_LEFT)


def max_relative_error(got: Sequence[np.ndarray], want: Sequence[np.ndarray]) -> float:
    """``max_t ||got_t - want_t||_max / ||want_t||_max`` (0/0 counts as 0)."""
    worst = 0.0
    for g, w in zip(got, want, strict=True):
        diff = float(np.max(np.abs(g - w)))
        ref = float(np.max(np.abs(w)))
        if diff == 0.0:
            continue
        worst = max(worst, diff / ref if ref > 0 else math.inf)
    return worst
