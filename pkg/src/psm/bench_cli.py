"""``psm`` command line: duality checks, affine-layer checks, cost audit, counter trace.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import math
import sys
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import affine_zoo as az
from .scan_engine import Aggregator, OnlineScanner, threads_from_env, verify_duality
from .tensor_core import seeded_init, splitmix64
from .tpsm import PsmConfig, PsmDecoder, init_weights, psm_aggregator

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
AFFINE_TOLERANCE = 1e-9
DEFAULT_VERIFY_NS = tuple(2**k for k in range(4, 11))


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- instances


@dataclass(frozen=True)
class DualityCase:
    name: str
    agg: Aggregator
    make_inputs: Callable[[int, int], list]  # (n, seed) -> elements


def _int_inputs(n: int, seed: int) -> list[int]:
    return [int(v) for v in (splitmix64(seed, n) >> np.uint64(40))]


def _float_inputs(n: int, seed: int) -> list[float]:
    return [float(v) for v in seeded_init((1, n), seed, 10.0).ravel()]


def _affine_inputs(kind: az.EKind, dim: int = 3):
    def make(n: int, seed: int) -> list[az.AffinePair]:
        pairs = []
        for i in range(n):
            s = (seed << 20) + i
            f = seeded_init((dim, dim), s, 1.0)
            if kind is az.EKind.SCALAR:
                E = 0.75 + 0.25 * float(seeded_init((1, 1), s ^ 0x5A5A, 1.0)[0, 0])
            elif kind is az.EKind.DIAG:
                E = 0.75 + 0.25 * seeded_init((dim, 1), s ^ 0x5A5A, 1.0)
            else:
                E = np.eye(dim) + seeded_init((dim, dim), s ^ 0x5A5A, 0.3 / dim)
            pairs.append(az.AffinePair(E, f, kind))
        return pairs

    return make


def _chunk_state_inputs(cfg: PsmConfig):
    def make(n: int, seed: int) -> list[np.ndarray]:
        return [seeded_init((cfg.chunk_size, cfg.model_dim), (seed << 20) + i, 1.0) for i in range(n)]

    return make


def tpsm_case(c: int, d: int, seed: int = 0, heads: int = 2, agg_layers: int = 1) -> DualityCase:
    cfg = PsmConfig(chunk_size=c, model_dim=d, heads=heads, agg_layers=agg_layers, inf_layers=1, vocab_size=16)
    w = init_weights(cfg, seed)
    return DualityCase(f"tpsm-attention(c={c},d={d})", psm_aggregator(w, cfg), _chunk_state_inputs(cfg))


def _faulty_aggregator() -> Aggregator:
    calls = itertools.count()
    # result depends on how many times it has been called: static and online disagree
    return Aggregator(lambda a, b: a - b + 1e-3 * next(calls), name="faulty")


def duality_cases(seed: int = 0, inject_fault: bool = False) -> list[DualityCase]:
    cases = [
        DualityCase("int-addition", Aggregator(lambda a, b: a + b, True, "int-addition"), _int_inputs),
        DualityCase("f64-subtraction", Aggregator(lambda a, b: a - b, False, "f64-subtraction"), _float_inputs),
    ]
    for kind in (az.EKind.SCALAR, az.EKind.DIAG, az.EKind.FULL_LEFT):
        cases.append(DualityCase(f"affine-{kind.value}", az.affine_aggregator(), _affine_inputs(kind)))
    cases.append(tpsm_case(2, 8, seed))
    if inject_fault:
        cases.append(DualityCase("faulty", _faulty_aggregator(), _float_inputs))
    return cases


# ------------------------------------------------------------------ affine


def affine_errors(kind: az.LayerKind, n: int, dim: int, seed: int) -> dict:
    """Max relative error of the static and online scan paths against the recurrence."""
    weights = az.init_layer_weights(kind, dim, seed)
    tokens = az.random_tokens(n, dim, seed)
    pairs = az.make_layer_pairs(kind, tokens, weights)
    want = az.sequential_affine(pairs)
    return {
        "layer": kind.value,
        "n": n,
        "dim": dim,
        "seed": seed,
        "static_max_rel_err": az.max_relative_error(az.scan_pair_states(pairs, "static"), want),
        "online_max_rel_err": az.max_relative_error(az.scan_pair_states(pairs, "online"), want),
    }


# -------------------------------------------------------------------- bench


def attention_flops(length: int, layers: int, dim: int) -> int:
    """Dense causal-attention cost of ``layers`` blocks over ``length`` positions: 4 l^2 d per layer."""
    return 4 * layers * length * length * dim


def _popcount(n: int) -> int:
    return bin(n).count("1")


def bench_rows(cfg: PsmConfig, n_tokens: int, baseline_layers: int | None = None) -> list[dict]:
    """Per-token analytic cost of streaming decode vs a KV-cache transformer.

    Costs follow the dense-attention model (``L l^2 d`` per block, projection
    terms dropped). A chunk's work (encode, one inference pass over
    ``[state; chunk]``, one amortised carry merge, and the emit fold that
    produced its state) is spread over its ``c`` tokens. The baseline
    attends one query over the whole context at every token. Aggregator call
    counts and occupied roots come from running the binary counter.
    """
    c, d = cfg.chunk_size, cfg.model_dim
    lb = baseline_layers if baseline_layers is not None else cfg.agg_layers + cfg.inf_layers
    agg = attention_flops(2 * c, cfg.agg_layers, d) / c
    enc = attention_flops(c, 1, d) / c
    scanner = OnlineScanner(Aggregator(lambda a, b: a, name="count"), record=True)
    rows = []
    for t in range(1, n_tokens + 1):
        i = (t - 1) // c
        calls = 0
        if t % c == 0:
            scanner.push(0)
            ins, em, _ = scanner.trace.per_element[-1]
            calls = ins + em
        emit_combines = _popcount(i) - 1 if i >= 1 else 0
        inf = attention_flops(c if i == 0 else 2 * c, cfg.inf_layers, d) / c
        base = inf + enc + (agg if i >= 1 else 0.0)
        emit = emit_combines * agg
        rows.append({
            "t": t,
            "psm_agg_calls": calls,
            "psm_flops_est": base + emit,
            "baseline_kv_flops_est": float(4 * lb * t * d),
            "occupied_roots": scanner.occupied,
            "psm_base_flops": base,
            "psm_emit_flops": emit,
            "emit_combines": emit_combines,
        })
    return rows


BENCH_COLUMNS = ("t", "psm_agg_calls", "psm_flops_est", "baseline_kv_flops_est", "occupied_roots")


class KVCacheBaseline:
    """Plain GPT-style decoder with a KV cache, for wall-clock comparison only."""

    def __init__(self, cfg: PsmConfig, layers: int, seed: int):
        d = cfg.model_dim
        self.cfg, self.layers = cfg, layers
        self.emb = seeded_init((cfg.vocab_size, d), seed, 1.0)
        self.w = [
            {k: seeded_init((d, d), (seed << 8) + 4 * layer + j, 1.0 / math.sqrt(d)) for j, k in enumerate("qkvo")}
            for layer in range(layers)
        ]
        self.keys = [[] for _ in range(layers)]
        self.values = [[] for _ in range(layers)]

    def feed(self, token: int) -> np.ndarray:
        h = self.emb[token]
        hd = self.cfg.head_dim
        for layer, w in enumerate(self.w):
            q, k, v = h @ w["q"], h @ w["k"], h @ w["v"]
            self.keys[layer].append(k)
            self.values[layer].append(v)
            K = np.asarray(self.keys[layer])
            V = np.asarray(self.values[layer])
            out = []
            for i in range(self.cfg.heads):
                sl = slice(i * hd, (i + 1) * hd)
                s = K[:, sl] @ q[sl] / math.sqrt(hd)
                p = np.exp(s - s.max())
                out.append((p / p.sum()) @ V[:, sl])
            h = h + np.concatenate(out) @ w["o"]
        return h


def wall_clock(cfg: PsmConfig, n_tokens: int, seed: int, baseline_layers: int) -> tuple[list[float], list[float]]:
    tokens = [int(v) % cfg.vocab_size for v in splitmix64(seed, n_tokens)]
    dec = PsmDecoder(init_weights(cfg, seed), cfg, record=False)
    base = KVCacheBaseline(cfg, baseline_layers, seed)
    psm_t, base_t = [], []
    for tok in tokens:
        t0 = time.perf_counter()
        dec.feed(tok)
        t1 = time.perf_counter()
        base.feed(tok)
        t2 = time.perf_counter()
        psm_t.append(t1 - t0)
        base_t.append(t2 - t1)
    return psm_t, base_t


# -------------------------------------------------------------------- trace


def trace_rows(n: int) -> tuple[list[tuple[int, int, int, int]], dict]:
    scanner = OnlineScanner(Aggregator(lambda a, b: a, name="count"), record=True)
    for _ in range(n):
        scanner.push(0)
    tr = scanner.trace
    totals = {
        "insert_calls": tr.insert_agg_calls,
        "emit_calls": tr.emit_agg_calls,
        "peak_occupied_roots": tr.peak_occupied_roots,
        "expected_insert_calls": n - _popcount(n),
    }
    return tr.rows(), totals


# ---------------------------------------------------------------------- io


def _emit(text: str | bytes, out: str) -> None:
    if out == "-":
        if isinstance(text, bytes):
            sys.stdout.buffer.write(text)
        else:
            sys.stdout.write(text)
        return
    mode = "wb" if isinstance(text, bytes) else "w"
    with open(out, mode) as fh:
        fh.write(text)


def _csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _table(header, rows, fmt: str):
    if fmt == "bin":
        return np.ascontiguousarray(np.asarray(rows, dtype=np.float64), dtype="<f8").tobytes()
    return _csv(header, [[_fmt(v) for v in r] for r in rows])


# ---------------------------------------------------------------- commands


def cmd_verify(args) -> int:
    ns = [args.n] if args.n is not None else list(DEFAULT_VERIFY_NS)
    for n in ns:
        if n < 1 or n & (n - 1):
            raise UsageError(f"--n must be a power of two for verify, got {n}")
    workers = threads_from_env()
    header = [
        "aggregator", "n", "all_equal", "mismatches", "peak_occupied_roots", "occupied_ok",
        "insert_total", "expected_insert_total", "emit_total", "emit_ok", "stated_bound_violations",
    ]
    rows = []
    failed = False
    for case in duality_cases(args.seed, args.inject_fault):
        for n in ns:
            rep = verify_duality(case.make_inputs(n, args.seed), case.agg, workers=workers)
            failed |= not rep.ok
            rows.append([
                case.name, n, rep.all_equal, len(rep.mismatches), rep.peak_occupied_roots, rep.occupied_ok,
                rep.insert_total, rep.expected_insert_total, rep.emit_total, rep.emit_ok,
                " ".join(map(str, rep.stated_bound_violations)),
            ])
    _emit(_csv(header, [[_fmt(v) for v in r] for r in rows]), args.out)
    print("verify: " + ("FAIL" if failed else "all pass"), file=sys.stderr)
    return EXIT_FAIL if failed else EXIT_OK


def cmd_affine(args) -> int:
    kinds = list(az.LayerKind) if args.layer in (None, "all") else [az.LayerKind.parse(args.layer)]
    n = args.n if args.n is not None else 256
    dim = args.dim if args.dim is not None else 8
    if n < 1 or dim < 1:
        raise UsageError("--n and --dim must be positive")
    header = ["layer", "n", "dim", "seed", "static_max_rel_err", "online_max_rel_err", "pass"]
    rows = []
    failed = False
    for kind in kinds:
        r = affine_errors(kind, n, dim, args.seed)
        ok = max(r["static_max_rel_err"], r["online_max_rel_err"]) <= AFFINE_TOLERANCE
        failed |= not ok
        rows.append([r[h] for h in header[:-1]] + [ok])
    _emit(_csv(header, [[_fmt(v) for v in r] for r in rows]), args.out)
    return EXIT_FAIL if failed else EXIT_OK


def _bench_config(args) -> PsmConfig:
    try:
        return PsmConfig(
            chunk_size=args.chunk if args.chunk is not None else 4,
            model_dim=args.dim if args.dim is not None else 32,
            heads=args.heads if args.heads is not None else 2,
            agg_layers=args.agg_layers,
            inf_layers=args.inf_layers,
            vocab_size=args.vocab,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_bench(args) -> int:
    cfg = _bench_config(args)
    n = args.n if args.n is not None else 4096 * cfg.chunk_size
    if n < 1:
        raise UsageError("--n must be positive")
    rows = bench_rows(cfg, n)
    header = list(BENCH_COLUMNS)
    table = [[r[k] for k in BENCH_COLUMNS] for r in rows]
    if args.wall_clock:
        psm_t, base_t = wall_clock(cfg, n, args.seed, cfg.agg_layers + cfg.inf_layers)
        header += ["psm_wall_s", "baseline_wall_s"]
        table = [row + [p, b] for row, p, b in zip(table, psm_t, base_t)]
    _emit(_table(header, table, args.format), args.out)
    return EXIT_OK


def cmd_trace(args) -> int:
    n = args.n if args.n is not None else 8
    if n < 1:
        raise UsageError("--n must be >= 1")
    rows, totals = trace_rows(n)
    ok = totals["insert_calls"] == totals["expected_insert_calls"]
    if args.format == "bin":
        _emit(_table(None, rows, "bin"), args.out)
    else:
        text = _csv(["t", "insert_calls", "emit_calls", "occupied_roots"], rows)
        text += f"total,{totals['insert_calls']},{totals['emit_calls']},{totals['peak_occupied_roots']}\n"
        text += f"expected_insert_calls,{totals['expected_insert_calls']},,{_fmt(ok)}\n"
        _emit(text, args.out)
    return EXIT_OK if ok else EXIT_FAIL


# ------------------------------------------------------------------ parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--n", type=int)
    common.add_argument("--chunk", type=int)
    common.add_argument("--dim", type=int)
    common.add_argument("--heads", type=int)
    common.add_argument("--layer", choices=az.LAYER_SPELLINGS + ("all",))
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="-", help="output path, '-' for stdout")
    common.add_argument("--format", choices=("csv", "bin"), default="csv")

    p = _Parser(prog="psm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    v = sub.add_parser("verify", parents=[common], help="static vs online scan, bit for bit")
    v.add_argument("--inject-fault", action="store_true", help="add a nondeterministic aggregator (must fail)")
    sub.add_parser("affine", parents=[common], help="scan paths vs sequential recurrence per layer kind")
    b = sub.add_parser("bench", parents=[common], help="per-token cost table")
    b.add_argument("--agg-layers", type=int, default=2)
    b.add_argument("--inf-layers", type=int, default=2)
    b.add_argument("--vocab", type=int, default=64)
    b.add_argument("--wall-clock", action="store_true", help="also time real decoding (not deterministic)")
    sub.add_parser("trace", parents=[common], help="binary-counter call counts per element")
    return p


COMMANDS = {"verify": cmd_verify, "affine": cmd_affine, "bench": cmd_bench, "trace": cmd_trace}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"psm: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"psm: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
