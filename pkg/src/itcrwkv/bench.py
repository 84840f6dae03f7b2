"""Micro-benchmark of the aggregation stage: latency, throughput, FLOPs, memory.

Timing is CPU wall-clock from a monotonic clock with a single BLAS thread.
Medians are the headline figures.  GPU memory and GPU latency from the
original hardware cannot be reproduced here, so the memory column is the
peak transient allocation of one forward call instead.

FLOP accounting covers the aggregation stage only and counts 2*m*k*p for
every (m x k) @ (k x p) contraction.  The scan has no contraction, so it is
charged a fixed number of operations per (token, channel) element,
``WKV_FLOPS_PER_ELEMENT``:

* forward and backward directional passes, each: exp of the shifted key,
  one multiply and one add into the numerator, one add into the denominator,
  one rescale of each accumulator (8 per direction, 16 total);
* combination with the bonus term: exp, multiply, two adds, one divide (5).

Element-wise work outside the scan (gates, norms, shifts) is not counted for
any kind.
"""
from __future__ import annotations

import csv
import math
import time
import tracemalloc
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

from . import tensor as T
from .aggr import AggrRwkvStack, CellSet, aggregate_cells, run_stack
from .baselines import (AGGREGATORS, MeanPoolParams, SelfAttentionParams, mean_pool_aggregate,
                        self_attention_aggregate)
from .wkv import bi_wkv_bruteforce, bi_wkv_values

PRIMITIVES = ("wkv_scan", "wkv_bruteforce")
BENCH_KINDS = AGGREGATORS + PRIMITIVES
WKV_FLOPS_PER_ELEMENT = 21
MIN_WARMUP = 5
MIN_REPS = 30
HEADER_NOTE = ("CPU wall-clock, single thread; the original GPU memory and latency figures are "
               "not reproducible here. flops = aggregation stage only; peak_bytes = peak "
               "transient allocation of one forward call.")


class BenchError(RuntimeError):
    pass


def check_kinds(kinds) -> list[str]:
    bad = [k for k in kinds if k not in BENCH_KINDS]
    if bad:
        raise ValueError(f"unknown aggregator {', '.join(map(repr, bad))}; valid: {', '.join(BENCH_KINDS)}")
    return list(kinds)


def flops(kind: str, n: int, d: int, depth: int = 1) -> int:
    """Analytic FLOP count of one forward call of ``kind`` on ``n`` tokens of width ``d``."""
    if kind == "rwkv":
        # spatial mix: R, K, V projections; channel mix: R, K projections; one scan
        return depth * (10 * n * d * d + WKV_FLOPS_PER_ELEMENT * n * d)
    if kind == "self_attention":
        return 6 * n * d * d + 2 * n * n * d + 2 * n * n * d
    if kind == "mean_pool":
        return n * d + 4 * d * d
    if kind == "wkv_scan":
        return WKV_FLOPS_PER_ELEMENT * n * d
    if kind == "wkv_bruteforce":
        # per (t, i, c): exp, multiply, two adds
        return 4 * n * n * d
    raise ValueError(kind)


@dataclass
class BenchRow:
    kind: str
    n: int
    d: int
    mean_ms: float
    median_ms: float
    p95_ms: float
    throughput: float        # forward calls per second, from the median
    flops: int
    peak_bytes: int
    tensor_peak_bytes: int
    warmup: int
    reps: int
    inner: int               # calls per timed repetition
    speedup: float = float("nan")   # self-attention median / this median


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)
    note: str = HEADER_NOTE

    def row(self, kind: str, n: int) -> BenchRow:
        for r in self.rows:
            if r.kind == kind and r.n == n:
                return r
        raise KeyError((kind, n))

    def ratio(self, kind: str, n_hi: int, n_lo: int) -> float:
        return self.row(kind, n_hi).median_ms / self.row(kind, n_lo).median_ms

    def write_csv(self, path) -> None:
        names = list(BenchRow.__dataclass_fields__)
        with open(path, "w", newline="") as fh:
            fh.write(f"# {self.note}\n")
            w = csv.writer(fh)
            w.writerow(names)
            for r in self.rows:
                w.writerow([getattr(r, k) for k in names])

    def table(self) -> str:
        lines = [f"# {self.note}",
                 f"{'kind':<15}{'n':>6}{'median ms':>12}{'mean ms':>11}{'p95 ms':>10}"
                 f"{'calls/s':>11}{'MFLOP':>11}{'peak MB':>10}{'speed-up':>10}"]
        for r in self.rows:
            lines.append(f"{r.kind:<15}{r.n:>6}{r.median_ms:>12.4f}{r.mean_ms:>11.4f}{r.p95_ms:>10.4f}"
                         f"{r.throughput:>11.1f}{r.flops / 1e6:>11.3f}{r.peak_bytes / 2**20:>10.2f}"
                         f"{r.speedup:>9.2f}x")
        return "\n".join(lines)


@dataclass
class _Inputs:
    features: np.ndarray
    centroids: np.ndarray
    boxes: np.ndarray
    extent: tuple[float, float]


def make_inputs(n: int, d: int, seed: int = 0) -> _Inputs:
    """Random cells scattered at roughly constant density."""
    rng = np.random.default_rng([seed, n, d])
    side = 16.0 * math.sqrt(n)
    cxy = rng.uniform(0.0, side, size=(n, 2))
    half = rng.uniform(1.0, 4.0, size=(n, 2))
    boxes = np.column_stack([np.maximum(cxy - half, 0.0), np.minimum(cxy + half, side)])
    return _Inputs(rng.normal(size=(n, d)), cxy, boxes, (side, side))


def make_runner(kind: str, d: int, heads: int = 4, depth: int = 1, seed: int = 0):
    """Parameters are built once; the returned callable maps inputs to one forward call."""
    rng = np.random.default_rng(seed)
    if kind == "rwkv":
        stack = AggrRwkvStack.init(d, depth, rng)

        def run(x: _Inputs):
            # fresh CellSet so neighbor search is part of every call
            cells = CellSet(x.features, x.centroids, x.boxes, x.extent)
            return aggregate_cells(run_stack(cells, stack)[0]).data
    elif kind == "self_attention":
        params = SelfAttentionParams.init(d, heads, rng)

        def run(x: _Inputs):
            return aggregate_cells(self_attention_aggregate(T.Tensor(x.features), params)).data
    elif kind == "mean_pool":
        params = MeanPoolParams.init(d, rng)

        def run(x: _Inputs):
            return mean_pool_aggregate(T.Tensor(x.features), params).data
    elif kind in PRIMITIVES:
        w = np.full(d, 1.0)
        u = np.zeros(d)
        fn = bi_wkv_values if kind == "wkv_scan" else bi_wkv_bruteforce

        def run(x: _Inputs):
            return fn(x.features, x.features, w, u)
    else:
        check_kinds([kind])
    return run


def _single_threaded() -> None:
    busy = [p for p in threadpool_info() if p.get("num_threads", 1) > 1]
    if busy:
        libs = ", ".join(f"{p['internal_api']}={p['num_threads']}" for p in busy)
        raise BenchError(f"refusing to benchmark with parallel thread pools active ({libs})")


def _peak_bytes(run, x) -> tuple[int, int]:
    with T.no_grad(), T.track_allocations() as counter:
        tracemalloc.start()
        try:
            tracemalloc.reset_peak()
            base = tracemalloc.get_traced_memory()[0]
            run(x)
            peak = tracemalloc.get_traced_memory()[1] - base
        finally:
            tracemalloc.stop()
    return int(peak), int(counter.peak)


def time_kind(run, x, warmup: int, reps: int, min_block_s: float = 2e-3):
    """Return per-call latencies (seconds) for ``reps`` repetitions and the inner-loop count."""
    clock = time.perf_counter_ns
    with T.no_grad():
        for _ in range(warmup):
            run(x)
        t0 = clock()
        run(x)
        single = max(clock() - t0, 1) * 1e-9
        # batch fast calls so a timed block is well above the clock resolution
        floor = max(min_block_s, 1000 * time.get_clock_info("perf_counter").resolution)
        inner = max(1, math.ceil(floor / single))
        out = np.empty(reps)
        for r in range(reps):
            t0 = clock()
            for _ in range(inner):
                run(x)
            out[r] = (clock() - t0) * 1e-9 / inner
    return out, inner


def run_bench(kinds, n_values, d: int = 64, reps: int = MIN_REPS, warmup: int = MIN_WARMUP,
              heads: int = 4, depth: int = 1, seed: int = 0, log=None) -> BenchReport:
    """Benchmark every kind at every set size on identical random inputs."""
    kinds = check_kinds(kinds)
    n_values = list(n_values)
    if n_values != sorted(n_values) or not n_values or n_values[0] < 1:
        raise ValueError("n_values must be positive and sorted ascending")
    if reps < MIN_REPS or warmup < MIN_WARMUP:
        raise ValueError(f"need at least {MIN_REPS} repetitions after {MIN_WARMUP} warm-ups")
    if d % heads:
        raise ValueError(f"width {d} not divisible by {heads} heads")

    report = BenchReport()
    with threadpool_limits(limits=1):
        _single_threaded()
        runners = {k: make_runner(k, d, heads, depth, seed) for k in kinds}
        for n in n_values:
            x = make_inputs(n, d, seed)
            for kind in kinds:
                lat, inner = time_kind(runners[kind], x, warmup, reps)
                peak, tpeak = _peak_bytes(runners[kind], x)
                ms = lat * 1e3
                med = float(np.median(ms))
                row = BenchRow(kind, n, d, float(ms.mean()), med, float(np.percentile(ms, 95)),
                               1e3 / med, flops(kind, n, d, depth), peak, tpeak, warmup, reps, inner)
                report.rows.append(row)
                if log:
                    log(row)
    for r in report.rows:
        if "self_attention" in kinds:
            r.speedup = report.row("self_attention", r.n).median_ms / r.median_ms
    return report


def report_dict(report: BenchReport) -> list[dict]:
    return [asdict(r) for r in report.rows]
