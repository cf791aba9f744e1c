"""Blelloch prefix scans over arbitrary binary operators.

Two evaluators share one parenthesisation:

* :func:`scan_static` builds the complete binary tree in heap layout, runs
  the upsweep and downsweep, and returns exclusive prefixes.
* :class:`OnlineScanner` (and :func:`scan_online`) keeps one mini-tree root
  per set bit of a binary counter and folds them MSB to LSB on emit.

Emission ``t`` of the online form is bitwise equal to exclusive prefix
``t + 1`` of the static form for any deterministic operator, associative or
not. :func:`verify_duality` checks exactly that.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "IDENTITY",
    "Aggregator",
    "CounterState",
    "ScanTrace",
    "OnlineScanner",
    "DualityReport",
    "ScanLengthError",
    "CounterOverflowError",
    "EmptyCounterError",
    "is_identity",
    "scan_static",
    "counter_insert",
    "counter_emit",
    "scan_online",
    "verify_duality",
    "bitwise_equal",
    "occupied_bound",
    "threads_from_env",
]

MAX_SLOTS = 64


class _Identity:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "IDENTITY"

    def __reduce__(self):
        return (_Identity, ())


IDENTITY = _Identity()
_EMPTY = object()


def is_identity(x) -> bool:
    return x is IDENTITY


class ScanLengthError(ValueError):
    pass


class CounterOverflowError(OverflowError):
    pass


class EmptyCounterError(ValueError):
    pass


@dataclass(frozen=True)
class Aggregator:
    """A binary operator on state elements.

    ``combine(left, right)`` receives the older element on the left. It is
    never called with :data:`IDENTITY`; :meth:`__call__` short-circuits that.
    """

    combine: Callable[[Any, Any], Any]
    claims_associative: bool = False
    name: str = "agg"

    def __call__(self, left, right):
        if left is IDENTITY:
            return right
        if right is IDENTITY:
            return left
        return self.combine(left, right)


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def threads_from_env() -> int:
    """Worker cap from ``PSM_THREADS`` (0 or unset means serial)."""
    try:
        return max(0, int(os.environ.get("PSM_THREADS", "0")))
    except ValueError:
        return 0


def scan_static(xs: Sequence, agg: Aggregator, *, with_total: bool = False, workers: int | None = None):
    """Exclusive prefixes of ``xs`` under the Blelloch tree parenthesisation.

    ``len(xs)`` must be a power of two. Output ``[0]`` is :data:`IDENTITY`.
    With ``with_total`` the root of the upsweep is returned as well, which is
    what the online form emits after the last element.

    ``workers`` > 1 evaluates the nodes of each tree level concurrently;
    every node is still computed from the same operands, so the result does
    not depend on it.
    """
    n = len(xs)
    if not _is_pow2(n):
        raise ScanLengthError(f"scan_static needs a power-of-two length, got {n}")
    for x in xs:
        if x is IDENTITY:
            raise ValueError("IDENTITY is not a valid scan input")
    tree: list = [None] * (2 * n)
    tree[n:] = list(xs)
    prefix: list = [None] * (2 * n)
    prefix[1] = IDENTITY

    pool = ThreadPoolExecutor(workers) if workers and workers > 1 else None
    try:
        def run_level(nodes, fn):
            if pool is None or len(nodes) < 2:
                for v in nodes:
                    fn(v)
            else:
                list(pool.map(fn, nodes))

        def up(v):
            tree[v] = agg(tree[2 * v], tree[2 * v + 1])

        def down(v):
            prefix[2 * v] = prefix[v]
            prefix[2 * v + 1] = agg(prefix[v], tree[2 * v])

        depth = n.bit_length() - 1
        for level in range(depth - 1, -1, -1):
            run_level(range(1 << level, 2 << level), up)
        for level in range(depth):
            run_level(range(1 << level, 2 << level), down)
    finally:
        if pool is not None:
            pool.shutdown()

    out = prefix[n:]
    return (out, tree[1]) if with_total else out


@dataclass
class ScanTrace:
    insert_agg_calls: int = 0
    emit_agg_calls: int = 0
    peak_occupied_roots: int = 0
    record: bool = True
    # (insert calls, emit calls, occupied roots) per element
    per_element: list[tuple[int, int, int]] = field(default_factory=list)

    def rows(self) -> list[tuple[int, int, int, int]]:
        return [(t, i, e, o) for t, (i, e, o) in enumerate(self.per_element)]

    def to_csv(self, fh=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "insert_calls", "emit_calls", "occupied_roots"])
        w.writerows(self.rows())
        text = buf.getvalue()
        if fh is not None:
            fh.write(text)
        return text


@dataclass
class CounterState:
    root: list = field(default_factory=list)
    elements_seen: int = 0
    occupied: int = 0

    def slot(self, k: int):
        """Root ``k`` or ``None`` when empty."""
        if k >= len(self.root) or self.root[k] is _EMPTY:
            return None
        return self.root[k]

    def occupied_slots(self) -> list[int]:
        return [k for k, r in enumerate(self.root) if r is not _EMPTY]


def counter_insert(state: CounterState, x, agg: Aggregator, trace: ScanTrace | None = None) -> CounterState:
    """Binary-counter increment: carry ``x`` through the trailing occupied roots."""
    if x is IDENTITY:
        raise ValueError("IDENTITY is not a valid scan input")
    carry = x
    k = 0
    merges = 0
    root = state.root
    while k < len(root) and root[k] is not _EMPTY:
        carry = agg(root[k], carry)
        root[k] = _EMPTY
        merges += 1
        k += 1
    if k >= MAX_SLOTS:
        raise CounterOverflowError("more than 2**64 - 1 elements")
    if k == len(root):
        root.append(_EMPTY)
    root[k] = carry
    state.elements_seen += 1
    state.occupied += 1 - merges
    if trace is not None:
        trace.insert_agg_calls += merges
        trace.peak_occupied_roots = max(trace.peak_occupied_roots, state.occupied)
        if trace.record:
            trace.per_element.append((merges, 0, state.occupied))
    return state


def counter_emit(state: CounterState, agg: Aggregator, trace: ScanTrace | None = None):
    """Fold the occupied roots from most to least significant slot."""
    if state.elements_seen == 0:
        raise EmptyCounterError("emit before any insert")
    p = IDENTITY
    calls = 0
    for k in range(state.elements_seen.bit_length() - 1, -1, -1):
        r = state.root[k]
        if r is not _EMPTY:
            if p is not IDENTITY:
                calls += 1
            p = agg(p, r)
    if trace is not None:
        trace.emit_agg_calls += calls
        if trace.record and trace.per_element:
            i, _, o = trace.per_element[-1]
            trace.per_element[-1] = (i, calls, o)
    return p


class OnlineScanner:
    """Streaming front end over :class:`CounterState`."""

    def __init__(self, agg: Aggregator, record: bool = True):
        self.agg = agg
        self.state = CounterState()
        self.trace = ScanTrace(record=record)

    def push(self, x, emit: bool = True):
        counter_insert(self.state, x, self.agg, self.trace)
        if emit:
            return counter_emit(self.state, self.agg, self.trace)
        return None

    @property
    def occupied(self) -> int:
        return self.state.occupied


def scan_online(xs: Iterable, agg: Aggregator, record: bool = True):
    """Emissions (inclusive Blelloch prefixes) for every element, plus the trace."""
    scanner = OnlineScanner(agg, record=record)
    out = [scanner.push(x) for x in xs]
    return out, scanner.trace


def bitwise_equal(a, b) -> bool:
    """Structural equality that compares floats and arrays by their bits."""
    if a is IDENTITY or b is IDENTITY:
        return a is b
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        if not (isinstance(a, np.ndarray) and isinstance(b, np.ndarray)):
            return False
        return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
    if isinstance(a, float) or isinstance(b, float):
        return type(a) is type(b) and np.float64(a).tobytes() == np.float64(b).tobytes()
    if dataclasses.is_dataclass(a) and not isinstance(a, type):
        if type(a) is not type(b):
            return False
        return all(bitwise_equal(getattr(a, f.name), getattr(b, f.name)) for f in dataclasses.fields(a))
    if isinstance(a, (tuple, list)):
        return (
            type(a) is type(b)
            and len(a) == len(b)
            and all(bitwise_equal(x, y) for x, y in zip(a, b))
        )
    return type(a) is type(b) and a == b


def occupied_bound(elements: int) -> int:
    """The stated memory bound ``ceil(log2(elements))``."""
    return math.ceil(math.log2(elements)) if elements > 1 else 0


def _popcount(n: int) -> int:
    return bin(n).count("1")


@dataclass
class DualityReport:
    n: int
    equal: list[bool]
    peak_occupied_roots: int
    occupied_ok: bool
    insert_total: int
    expected_insert_total: int
    emit_total: int
    emit_ok: bool
    # element counts m at which occupied roots exceeded ceil(log2(m))
    stated_bound_violations: list[int] = field(default_factory=list)

    @property
    def all_equal(self) -> bool:
        return all(self.equal)

    @property
    def ok(self) -> bool:
        return (
            self.all_equal
            and self.occupied_ok
            and self.emit_ok
            and self.insert_total == self.expected_insert_total
        )

    @property
    def mismatches(self) -> list[int]:
        return [i for i, e in enumerate(self.equal) if not e]


def verify_duality(xs: Sequence, agg: Aggregator, workers: int | None = None) -> DualityReport:
    """Compare online emissions against static exclusive prefixes, bit for bit.

    Emission ``t < n - 1`` is matched with static prefix ``t + 1``; the last
    emission is matched with the upsweep root. Also checks the counter's
    occupancy and merge totals. ``occupied_ok`` uses the bit length of
    ``t + 1`` (one root per set bit); counts exceeding ``ceil(log2(t + 1))``
    are listed separately; for any operator the only such count is 1.
    """
    n = len(xs)
    static, total = scan_static(xs, agg, with_total=True, workers=workers)
    scanner = OnlineScanner(agg, record=True)
    equal = []
    violations = []
    occupied_ok = True
    emit_ok = True
    for t, x in enumerate(xs):
        p = scanner.push(x)
        want = static[t + 1] if t + 1 < n else total
        equal.append(bitwise_equal(p, want))
        m = t + 1
        _, emit_calls, occ = scanner.trace.per_element[-1]
        occupied_ok &= occ == _popcount(m) and occ <= m.bit_length()
        if occ > occupied_bound(m):
            violations.append(m)
        emit_ok &= emit_calls == _popcount(m) - 1 and emit_calls <= m.bit_length() - 1
    tr = scanner.trace
    return DualityReport(
        n=n,
        equal=equal,
        peak_occupied_roots=tr.peak_occupied_roots,
        occupied_ok=occupied_ok,
        insert_total=tr.insert_agg_calls,
        expected_insert_total=n - _popcount(n),
        emit_total=tr.emit_agg_calls,
        emit_ok=emit_ok,
        stated_bound_violations=violations,
    )
