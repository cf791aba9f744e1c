"""Acceptance criteria, one test per criterion, each at its stated tolerance and time budget.

Every test records a PASS/FAIL line that is printed in the terminal summary.
"""

import math
import time

import numpy as np
import pytest

from psm import affine_zoo as az
from psm.bench_cli import bench_rows, duality_cases, tpsm_case
from psm.scan_engine import (
    Aggregator,
    CounterState,
    OnlineScanner,
    counter_insert,
    occupied_bound,
    scan_online,
    scan_static,
    verify_duality,
)
from psm.tensor_core import seeded_init
from psm.tpsm import PsmConfig, agg_attention, init_weights, psm_decode_stream, psm_forward_static

pytestmark = pytest.mark.acceptance

E2E_CFG = PsmConfig(chunk_size=4, model_dim=32, heads=2, agg_layers=2, inf_layers=2, vocab_size=64)
TRIVIAL = Aggregator(lambda a, b: a, name="trivial")


def popcount(n):
    return bin(n).count("1")


def test_c1_duality(acceptance):
    t0 = time.perf_counter()
    cases = duality_cases(seed=0)[:5]
    cases += [tpsm_case(c, d, seed=0) for c in (1, 2, 4) for d in (8, 16)]
    failures = []
    for case in cases:
        for n in (16, 64, 256, 1024):
            rep = verify_duality(case.make_inputs(n, 0), case.agg)
            if not rep.all_equal:
                failures.append(f"{case.name} n={n} first mismatch {rep.mismatches[0]}")
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 60
    acceptance("C1", "online/static duality, 11 aggregators x 4 lengths, bitwise",
               ok, f"{elapsed:.1f}s; " + ("; ".join(failures) if failures else "0 mismatches"))
    assert not failures
    assert elapsed < 60


def test_c2_affine_unification(acceptance):
    t0 = time.perf_counter()
    worst = 0.0
    worst_at = None
    for kind in az.LayerKind:
        for seed in range(5):
            x = az.random_tokens(256, 8, seed)
            pairs = az.make_layer_pairs(kind, x, az.init_layer_weights(kind, 8, seed))
            want = az.sequential_affine(pairs)
            for path in ("static", "online"):
                err = az.max_relative_error(az.scan_pair_states(pairs, path), want)
                if err >= worst:
                    worst, worst_at = err, f"{kind.value} seed {seed} {path}"
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and elapsed < 30
    acceptance("C2", "ten affine layer kinds, scan vs recurrence <= 1e-9",
               ok, f"{elapsed:.1f}s; worst {worst:.2e} at {worst_at}")
    assert worst <= 1e-9
    assert elapsed < 30


def _stream_occupancy(total):
    state = CounterState()
    occupied = []
    for _ in range(total):
        counter_insert(state, 0, TRIVIAL)
        occupied.append(state.occupied)
    return occupied


@pytest.fixture(scope="module")
def stream_2_20():
    t0 = time.perf_counter()
    occ = _stream_occupancy(1 << 20)
    return occ, time.perf_counter() - t0


@pytest.mark.xfail(strict=True, reason="one root is live after the first element, but ceil(log2(1)) = 0")
def test_c3_memory_bound_literal(acceptance, stream_2_20):
    occ, elapsed = stream_2_20
    violations = [m for m, o in enumerate(occ, start=1) if o > occupied_bound(m)]
    peak = max(occ)
    ok = not violations and peak == 20 and elapsed < 10
    acceptance("C3", "2^20 stream, occupied roots <= ceil(log2(t+1)), peak 20",
               ok, f"{elapsed:.1f}s; peak {peak}; bound exceeded at t+1 in {violations[:5]}")
    assert not violations


def test_c3_memory_bound_exact(acceptance, stream_2_20):
    occ, elapsed = stream_2_20
    violations = [m for m, o in enumerate(occ, start=1) if o > occupied_bound(m)]
    by_popcount = all(o == popcount(m) for m, o in enumerate(occ, start=1))
    by_bits = all(o <= m.bit_length() for m, o in enumerate(occ, start=1))
    peak = max(occ)
    first_peak = occ.index(peak) + 1
    ok = violations == [1] and by_popcount and by_bits and peak == 20 and first_peak == (1 << 20) - 1 and elapsed < 10
    acceptance("C3.x", "2^20 stream, roots == popcount(t+1) <= bitlen(t+1); log bound fails only at t+1=1",
               ok, f"{elapsed:.1f}s; peak {peak} first at t+1={first_peak}")
    assert violations == [1]
    assert by_popcount and by_bits
    assert peak == 20 and first_peak == (1 << 20) - 1
    assert elapsed < 10


def test_c4_amortized_work(acceptance):
    t0 = time.perf_counter()
    scanner = OnlineScanner(TRIVIAL, record=True)
    bad_insert, bad_emit = [], []
    inserts = 0
    for n in range(1, 4097):
        scanner.push(0)
        ins, emit, _ = scanner.trace.per_element[-1]
        inserts += ins
        if inserts != n - popcount(n):
            bad_insert.append(n)
        if emit > math.floor(math.log2(n)):
            bad_emit.append(n)
    # a fresh counter fed n elements is the same as the first n steps of the long stream
    spot = [1, 2, 3, 255, 1000, 4095, 4096]
    fresh_ok = all(scan_online([0] * n, TRIVIAL)[1].insert_agg_calls == n - popcount(n) for n in spot)
    elapsed = time.perf_counter() - t0
    ok = not bad_insert and not bad_emit and fresh_ok and elapsed < 10
    acceptance("C4", "insert merges == n - popcount(n), emit combines <= floor(log2(t+1)), n = 1..4096",
               ok, f"{elapsed:.1f}s; insert violations {len(bad_insert)}, emit violations {len(bad_emit)}")
    assert not bad_insert and not bad_emit and fresh_ok
    assert elapsed < 10


def test_c5_end_to_end(acceptance):
    t0 = time.perf_counter()
    results = []
    for seed in range(3):
        w = init_weights(E2E_CFG, seed)
        ids = [int(v) for v in (seeded_init((1, 256), 100 + seed, 32.0).ravel() + 32.0).astype(int) % 64]
        static = psm_forward_static(ids, w, E2E_CFG)
        decoded, _ = psm_decode_stream(ids, w, E2E_CFG)
        results.append(static.shape == (256, 64) and static.tobytes() == decoded.tobytes())
    elapsed = time.perf_counter() - t0
    ok = all(results) and elapsed < 60
    acceptance("C5", "T-PSM static forward vs streaming decode logits, bitwise, 3 seeds",
               ok, f"{elapsed:.1f}s; equal per seed {results}")
    assert all(results)
    assert elapsed < 60


def _rel(got, want):
    return float(np.max(np.abs(got - want)) / np.max(np.abs(want)))


def test_c6_lti_closed_form(acceptance):
    t0 = time.perf_counter()
    agg = az.affine_aggregator()
    worst = 0.0
    for dim in (3, 8):
        for seed in range(3):
            A = seeded_init((dim, dim), 10 * dim + seed, 1.0 / math.sqrt(dim))
            B = seeded_init((dim, 2), 20 * dim + seed, 1.0)
            xs = list(seeded_init((64, 2), 30 * dim + seed, 1.0))
            pairs = az.lti_pairs(A, B, xs)
            prefixes, total = scan_static(pairs, agg, with_total=True)
            static = prefixes[1:] + [total]
            online, _ = scan_online(pairs, agg, record=False)
            for t in range(1, 65):
                want = az.lti_prefix_closed_form(A, B, xs, t)
                for got in (static[t - 1], online[t - 1]):
                    worst = max(worst, _rel(got.E, want.E), _rel(got.f, want.f))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and elapsed < 5
    acceptance("C6", "LTI fold vs closed form, 3x3 and 8x8, t <= 64, <= 1e-9 relative",
               ok, f"{elapsed:.1f}s; worst {worst:.2e}")
    assert worst <= 1e-9
    assert elapsed < 5


def test_c7_cost_shape(acceptance):
    t0 = time.perf_counter()
    c = E2E_CFG.chunk_size
    rows = bench_rows(E2E_CFG, 4096 * c)
    window = [r for r in rows if r["t"] >= c]
    t = np.array([r["t"] for r in window], dtype=np.float64)
    base = np.array([r["baseline_kv_flops_est"] for r in window])
    slope, icept = np.polyfit(t, base, 1)
    resid = base - (slope * t + icept)
    r2 = 1.0 - float(resid @ resid) / float(((base - base.mean()) ** 2).sum())

    later = {r["psm_base_flops"] for r in rows if r["t"] > c}
    first = {r["psm_base_flops"] for r in rows if r["t"] <= c}
    constant = len(later) == 1 and len(first) == 1 and max(first) <= min(later)

    emit_ok = all(r["emit_combines"] <= math.log2(r["t"] / c) for r in window)

    def ratio(row):
        return row["psm_flops_est"] / row["baseline_kv_flops_est"]

    r_start, r_end = ratio(rows[c - 1]), ratio(rows[4096 * c - 1])
    shrink = r_end / r_start
    elapsed = time.perf_counter() - t0
    ok = r2 > 0.999 and constant and emit_ok and shrink < 0.05 and elapsed < 60
    acceptance("C7", "per-token cost shape: baseline linear, PSM flat + log emit, ratio shrinks",
               ok, f"{elapsed:.1f}s; R2 {r2:.6f}; ratio(4096c)/ratio(c) {shrink:.4f}")
    assert r2 > 0.999
    assert constant
    assert emit_ok
    assert shrink < 0.05
    assert elapsed < 60


def test_c8_non_associativity(acceptance):
    t0 = time.perf_counter()
    w = init_weights(E2E_CFG, 11)
    shape = (E2E_CFG.chunk_size, E2E_CFG.model_dim)
    diffs = []
    for i in range(10):
        a, b, c = (seeded_init(shape, 1000 + 3 * i + j, 1.0) for j in range(3))
        left = agg_attention(agg_attention(a, b, w, E2E_CFG), c, w, E2E_CFG)
        right = agg_attention(a, agg_attention(b, c, w, E2E_CFG), w, E2E_CFG)
        diffs.append(float(np.max(np.abs(left - right))))
    hits = sum(d > 1e-6 for d in diffs)
    elapsed = time.perf_counter() - t0
    ok = hits >= 9 and elapsed < 5
    acceptance("C8", "agg_attention non-associative on >= 9 of 10 triples (> 1e-6)",
               ok, f"{elapsed:.1f}s; {hits}/10, min diff {min(diffs):.2e}")
    assert hits >= 9
    assert elapsed < 5
