"""Slow reference implementations and the equivalence suite built on them."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .interaction import TissueTokenGrid, multi_head_attention, roi_pool
from .tensor import Tensor
from .wkv import bi_wkv_bruteforce, bi_wkv_values

WKV_TOL = 1e-9
WKV_SPIKE_TOL = 1e-6
ATTENTION_TOL = 1e-12


def relative_error(a, b) -> float:
    """Worst ``|a - b|`` with each column scaled by the largest reference magnitude in it.

    Entries of ``b`` that happen to sit near zero do not inflate the ratio.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        return float("inf")
    b2 = b.reshape(b.shape[0], -1) if b.ndim > 1 else b.reshape(-1, 1)
    a2 = a.reshape(b2.shape)
    scale = np.maximum(np.abs(b2).max(axis=0, keepdims=True), 1e-300)
    return float((np.abs(a2 - b2) / scale).max())


def attention_double_loop(Q, K, V, heads: int) -> np.ndarray:
    """Softmax attention written as explicit loops over heads, queries and keys."""
    Q, K, V = (np.asarray(x, dtype=np.float64) for x in (Q, K, V))
    m, d = Q.shape
    n = K.shape[0]
    dh = d // heads
    out = np.zeros((m, d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(m):
            scores = [float(Q[i, sl] @ K[j, sl]) / np.sqrt(dh) for j in range(n)]
            top = max(scores)
            weights = [np.exp(s - top) for s in scores]
            total = sum(weights)
            for j in range(n):
                out[i, sl] += weights[j] / total * V[j, sl]
    return out


def roi_pool_bruteforce(grid: TissueTokenGrid, box, dilation: float) -> np.ndarray:
    """Visit every token and keep those whose footprint meets the dilated box.

    The dilated box is clipped to the image.  A zero-length side is a point
    and belongs to the footprint ``[a, b)``; a point on the far image edge
    belongs to the last footprint inside the image.
    """
    x0, y0, x1, y1 = (float(v) for v in box)
    w, h = grid.image_extent
    x0, y0 = max(x0 - dilation, 0.0), max(y0 - dilation, 0.0)
    x1, y1 = min(x1 + dilation, w), min(y1 + dilation, h)
    g_h, g_w, _ = grid.tokens.shape
    p = grid.patch_size

    def meets(lo, hi, k, extent):
        a, b = k * p, (k + 1) * p
        if a >= extent:
            return False
        if hi > lo:
            return lo < b and hi > a
        return a <= lo < b or (lo >= extent and b >= extent)

    picked = [grid.tokens[r, c] for r in range(g_h) for c in range(g_w)
              if meets(y0, y1, r, h) and meets(x0, x1, c, w)]
    return np.mean(picked, axis=0)


@dataclass
class OracleResult:
    name: str
    cases: int
    worst: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.worst < self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.cases} cases, worst relative error {self.worst:.3e} (tol {self.tol:g})"


def check_wkv(n_values, d_values, trials: int, seed: int = 0, spike: float = 0.0) -> OracleResult:
    """Scan against the direct sum on random inputs; ``spike`` widens the key range."""
    rng = np.random.default_rng([seed, 0x5CA7])
    worst, cases = 0.0, 0
    for n in n_values:
        for d in d_values:
            for _ in range(trials):
                K = rng.uniform(-spike, spike, size=(n, d)) if spike else rng.normal(size=(n, d))
                V = rng.normal(size=(n, d))
                w = rng.uniform(0.0, 3.0, size=d)
                u = rng.normal(size=d)
                worst = max(worst, relative_error(bi_wkv_values(K, V, w, u), bi_wkv_bruteforce(K, V, w, u)))
                cases += 1
    name = "bi_wkv" if not spike else f"bi_wkv |K|<={spike:g}"
    return OracleResult(name, cases, worst, WKV_SPIKE_TOL if spike else WKV_TOL)


def check_attention(n_max: int, trials: int, seed: int = 0) -> OracleResult:
    rng = np.random.default_rng([seed, 0xA77])
    worst, cases = 0.0, 0
    for _ in range(trials):
        heads = int(rng.choice([1, 2, 4]))
        d = heads * int(rng.integers(1, 4))
        m, n = (int(v) for v in rng.integers(1, max(n_max, 1) + 1, size=2))
        m, n = min(m, 16), min(n, 16)
        Q, K, V = rng.normal(size=(m, d)), rng.normal(size=(n, d)), rng.normal(size=(n, d))
        got, _ = multi_head_attention(Tensor(Q), Tensor(K), Tensor(V), heads)
        worst = max(worst, relative_error(got.data, attention_double_loop(Q, K, V, heads)))
        cases += 1
    return OracleResult("attention", cases, worst, ATTENTION_TOL)


def check_roi_pool(trials: int, seed: int = 0) -> OracleResult:
    rng = np.random.default_rng([seed, 0x201])
    worst, cases = 0.0, 0
    for _ in range(trials):
        g_h, g_w = (int(v) for v in rng.integers(1, 7, size=2))
        p = float(rng.choice([1.0, 4.0, 16.0]))
        # image may stop short of the grid edge, leaving padding tokens
        W = g_w * p - float(rng.integers(0, 2)) * rng.uniform(0, p)
        H = g_h * p - float(rng.integers(0, 2)) * rng.uniform(0, p)
        grid = TissueTokenGrid(rng.normal(size=(g_h, g_w, 3)), np.zeros(3), p, (W, H))
        # snap some corners to the patch lattice to exercise shared edges
        pts = rng.uniform(0, 1, size=4) * [W, H, W, H]
        if rng.random() < 0.5:
            pts = np.minimum(np.round(pts / p) * p, [W, H, W, H])
        x0, x1 = sorted(pts[[0, 2]])
        y0, y1 = sorted(pts[[1, 3]])
        dil = float(rng.choice([0.0, p / 2, p]))
        box = (x0, y0, x1, y1)
        worst = max(worst, relative_error(roi_pool(grid, box, dil), roi_pool_bruteforce(grid, box, dil)))
        cases += 1
    return OracleResult("roi_pool", cases, worst, ATTENTION_TOL)


def oracle_suite(n_max: int = 64, trials: int = 50, d_values=(1, 4, 8), seed: int = 0) -> list[OracleResult]:
    ns = [n for n in (1, 2, 3, 5, 8, 16, 32, 64, 128, 256) if n <= n_max] or [max(n_max, 1)]
    if n_max not in ns and n_max >= 1:
        ns.append(n_max)
    return [check_wkv(ns, d_values, trials, seed),
            check_wkv(ns, d_values, max(trials // 5, 1), seed + 1, spike=30.0),
            check_attention(n_max, trials, seed),
            check_roi_pool(trials, seed)]
