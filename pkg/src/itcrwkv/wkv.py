"""Bidirectional WKV aggregation.

For every channel ``c`` the output at position ``t`` is a positive, normalized
combination of the values::

    wkv[t] = (sum_{i != t} exp(K[i] - (|t-i|-1)/n * w) V[i] + exp(u + K[t]) V[t])
             / (same sum with V replaced by 1)

``bi_wkv_bruteforce`` evaluates the double sum directly.  ``bi_wkv_scan``
computes the same quantity with a prefix scan, a suffix scan and the bonus
term, each carried as ``(scaled numerator, scaled denominator, log scale)``
so that only differences of exponents are ever exponentiated.
"""
from __future__ import annotations

import numpy as np
from numba import njit

from .tensor import Tensor, as_tensor, custom

# log-scale of an empty accumulator; finite so that differences stay defined
_EMPTY = -1e300


def bi_wkv_bruteforce(K, V, w, u) -> np.ndarray:
    """O(n^2 d) reference evaluation, stabilized by a per-row maximum."""
    K, V = _arr(K), _arr(V)
    w, u = _arr(w), _arr(u)
    n, d = K.shape
    if n < 1:
        raise ValueError("bi_wkv needs at least one token")
    out = np.empty((n, d))
    idx = np.arange(n)
    for t in range(n):
        dist = (np.abs(t - idx) - 1) / n
        e = K - dist[:, None] * w[None, :]
        e[t] = u + K[t]
        m = e.max(axis=0)
        wts = np.exp(e - m)
        out[t] = (wts * V).sum(axis=0) / wts.sum(axis=0)
    return out


def _arr(x) -> np.ndarray:
    return np.ascontiguousarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


@njit(cache=True)
def _wkv_forward(k, v, w, u):
    n, d = k.shape
    wd = w / n
    fp = np.empty((n, d))
    fq = np.empty((n, d))
    fo = np.empty((n, d))
    pa = np.zeros(d)
    qa = np.zeros(d)
    oa = np.full(d, _EMPTY)
    for t in range(n):
        for c in range(d):
            fp[t, c] = pa[c]
            fq[t, c] = qa[c]
            fo[t, c] = oa[c]
            o1 = oa[c] - wd[c]
            o2 = k[t, c]
            m = max(o1, o2)
            e1 = np.exp(o1 - m)
            e2 = np.exp(o2 - m)
            pa[c] = e1 * pa[c] + e2 * v[t, c]
            qa[c] = e1 * qa[c] + e2
            oa[c] = m

    y = np.empty((n, d))
    o = np.empty((n, d))
    q = np.empty((n, d))
    pa[:] = 0.0
    qa[:] = 0.0
    oa[:] = _EMPTY
    for t in range(n - 1, -1, -1):
        for c in range(d):
            ob = u[c] + k[t, c]
            m = max(fo[t, c], oa[c], ob)
            a = np.exp(fo[t, c] - m)
            b = np.exp(oa[c] - m)
            e = np.exp(ob - m)
            den = a * fq[t, c] + b * qa[c] + e
            y[t, c] = (a * fp[t, c] + b * pa[c] + e * v[t, c]) / den
            o[t, c] = m
            q[t, c] = den

            o1 = oa[c] - wd[c]
            o2 = k[t, c]
            m = max(o1, o2)
            e1 = np.exp(o1 - m)
            e2 = np.exp(o2 - m)
            pa[c] = e1 * pa[c] + e2 * v[t, c]
            qa[c] = e1 * qa[c] + e2
            oa[c] = m
    return y, o, q


@njit(cache=True)
def _wkv_backward(k, v, w, u, y, o, q, g):
    n, d = k.shape
    wd = w / n
    # output gradient split into d/dnumerator and d/ddenominator, both
    # expressed relative to exp(o[t])
    ah = g / q
    bh = -g * y / q
    bonus = np.exp(u + k - o)
    dv = ah * bonus
    dk = bonus * (ah * v + bh)
    du = dk.sum(axis=0)
    dwd = np.zeros(d)

    for direction in range(2):
        pa = np.zeros(d)
        qa = np.zeros(d)
        pm = np.zeros(d)
        qm = np.zeros(d)
        oa = np.full(d, _EMPTY)
        la = np.zeros(d)
        lb = np.zeros(d)
        lo = np.full(d, _EMPTY)
        for step in range(n):
            t = step if direction == 0 else n - 1 - step
            for c in range(d):
                # decay derivative from distance-weighted value moments
                f = np.exp(oa[c] - o[t, c])
                dwd[c] -= f * (ah[t, c] * pm[c] + bh[t, c] * qm[c])
                # this token as a key for every already-scanned query
                e = np.exp(k[t, c] + lo[c])
                sa = e * la[c]
                dv[t, c] += sa
                dk[t, c] += v[t, c] * sa + e * lb[c]

                o1 = oa[c] - wd[c]
                o2 = k[t, c]
                m = max(o1, o2)
                e1 = np.exp(o1 - m)
                e2 = np.exp(o2 - m)
                pm[c] = e1 * (pm[c] + pa[c])
                qm[c] = e1 * (qm[c] + qa[c])
                pa[c] = e1 * pa[c] + e2 * v[t, c]
                qa[c] = e1 * qa[c] + e2
                oa[c] = m

                o1 = lo[c] - wd[c]
                o2 = -o[t, c]
                m = max(o1, o2)
                e1 = np.exp(o1 - m)
                e2 = np.exp(o2 - m)
                la[c] = e1 * la[c] + e2 * ah[t, c]
                lb[c] = e1 * lb[c] + e2 * bh[t, c]
                lo[c] = m
    return dk, dv, dwd / n, du


def bi_wkv_values(K, V, w, u) -> np.ndarray:
    """Linear-time forward evaluation on plain arrays."""
    k = _arr(K)
    if k.ndim != 2 or k.shape[0] < 1:
        raise ValueError(f"bi_wkv needs an n x d key matrix with n >= 1, got {k.shape}")
    y, _, _ = _wkv_forward(k, _arr(V), _arr(w), _arr(u))
    return y


def bi_wkv_scan(K, V, w, u) -> Tensor:
    """Differentiable O(n d) bidirectional WKV.

    ``w`` must already be the non-negative effective decay.
    """
    K, V, w, u = (as_tensor(x) for x in (K, V, w, u))
    k, v, wv, uv = _arr(K), _arr(V), _arr(w), _arr(u)
    if k.ndim != 2 or k.shape[0] < 1 or v.shape != k.shape or wv.shape != (k.shape[1],) \
            or uv.shape != (k.shape[1],):
        raise ValueError(f"bi_wkv shapes K{k.shape} V{v.shape} w{wv.shape} u{uv.shape}")
    y, o, q = _wkv_forward(k, v, wv, uv)

    def back(g):
        return _wkv_backward(k, v, wv, uv, y, o, q, np.ascontiguousarray(g))

    return custom("bi_wkv", y, (K, V, w, u), back)
