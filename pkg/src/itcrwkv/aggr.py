"""Aggr-RWKV: linear-time refinement and aggregation of an unordered cell set."""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree

from . import tensor as T
from .tensor import Tensor
from .wkv import bi_wkv_scan

UP, DOWN, LEFT, RIGHT = range(4)
DEFAULT_MU = 0.5
LN_EPS = 1e-5


class EmptyCellSetError(ValueError):
    pass


@dataclass(eq=False)
class CellSet:
    """Per-cell feature rows with their geometry (pixels, y pointing down).

    ``boxes`` rows are ``(x0, y0, x1, y1)``; ``image_extent`` is ``(width, height)``.
    """

    features: np.ndarray
    centroids: np.ndarray
    boxes: np.ndarray
    image_extent: tuple[float, float]

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.centroids = np.ascontiguousarray(self.centroids, dtype=np.float64).reshape(-1, 2)
        self.boxes = np.ascontiguousarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.image_extent = (float(self.image_extent[0]), float(self.image_extent[1]))
        n = self.features.shape[0]
        if n < 1:
            raise EmptyCellSetError("a cell set needs at least one cell")
        if self.features.ndim != 2 or self.centroids.shape[0] != n or self.boxes.shape[0] != n:
            raise ValueError(
                f"inconsistent cell set: features {self.features.shape}, "
                f"centroids {self.centroids.shape}, boxes {self.boxes.shape}")
        x, y = self.centroids[:, 0], self.centroids[:, 1]
        b = self.boxes
        if np.any(b[:, 0] > x) or np.any(x > b[:, 2]) or np.any(b[:, 1] > y) or np.any(y > b[:, 3]):
            raise ValueError("every centroid must lie inside its box")
        w, h = self.image_extent
        if np.any(b[:, :2] < 0) or np.any(b[:, 2] > w) or np.any(b[:, 3] > h):
            raise ValueError("every box must lie inside the image extent")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def areas(self) -> np.ndarray:
        return (self.boxes[:, 2] - self.boxes[:, 0]) * (self.boxes[:, 3] - self.boxes[:, 1])

    def permuted(self, perm) -> "CellSet":
        perm = np.asarray(perm, dtype=np.intp)
        return CellSet(self.features[perm], self.centroids[perm], self.boxes[perm], self.image_extent)

    @cached_property
    def neighbors(self) -> np.ndarray:
        return direction_neighbors(self.centroids)


def canonical_order(cells: CellSet) -> np.ndarray:
    """Permutation sorting cells by (y, x, box area, feature row, input index).

    The feature row tie-break makes the result independent of input order even
    for distinct cells sharing a centroid and box.
    """
    keys = [np.arange(cells.n)]
    keys += [cells.features[:, j] for j in range(cells.features.shape[1] - 1, -1, -1)]
    keys += [cells.areas, cells.centroids[:, 0], cells.centroids[:, 1]]
    return np.lexsort(keys)


def canonicalize(cells: CellSet) -> tuple[CellSet, np.ndarray]:
    perm = canonical_order(cells)
    return cells.permuted(perm), perm


# ---------------------------------------------------------------------------
# directional neighbors


def cone_of(dx, dy) -> np.ndarray:
    """Direction cone of a displacement: 0 up, 1 down, 2 left, 3 right, -1 for none.

    Cones are 90 degree wedges around the axes.  Boundaries on the diagonals are
    half-open so the four cones partition the plane without the origin.
    """
    dx = np.asarray(dx, dtype=np.float64)
    dy = np.asarray(dy, dtype=np.float64)
    du, dv = dx + dy, dx - dy
    out = np.full(np.broadcast(dx, dy).shape, -1, dtype=np.int64)
    out[(du > 0) & (dv >= 0)] = RIGHT
    out[(du <= 0) & (dv > 0)] = UP
    out[(du < 0) & (dv <= 0)] = LEFT
    out[(du >= 0) & (dv < 0)] = DOWN
    return out


def _pick(src: np.ndarray, cand: np.ndarray, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per row, the nearest candidate in each cone (-1 when none) and its squared distance.

    ``src`` holds the query indices, ``cand`` an equally long stack of candidate
    index rows.  Ties in distance go to the lowest candidate index.
    """
    d = pts[cand] - pts[src][:, None, :]
    d2 = d[..., 0] ** 2 + d[..., 1] ** 2
    cones = cone_of(d[..., 0], d[..., 1])
    best = np.empty((len(src), 4), dtype=np.int64)
    best_d2 = np.empty((len(src), 4))
    big = np.iinfo(np.int64).max
    for c in range(4):
        masked = np.where(cones == c, d2, np.inf)
        m = masked.min(axis=1)
        idx = np.where((masked == m[:, None]) & np.isfinite(masked), cand, big).min(axis=1)
        best[:, c] = np.where(np.isfinite(m), idx, -1)
        best_d2[:, c] = m
    return best, best_d2


def direction_neighbors_bruteforce(centroids) -> np.ndarray:
    """O(n^2) reference for :func:`direction_neighbors`."""
    pts = np.asarray(centroids, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    out = np.empty((n, 4), dtype=np.int64)
    everyone = np.arange(n)
    for i in range(n):
        best, _ = _pick(np.array([i]), everyone[None, :], pts)
        out[i] = np.where(best[0] < 0, i, best[0])
    return out


def empty_cones(centroids) -> np.ndarray:
    """``n x 4`` mask of direction cones that contain no other centroid.

    In rotated coordinates ``(x + y, x - y)`` each cone is a quadrant, so
    emptiness reduces to prefix/suffix extrema after one sort.
    """
    pts = np.asarray(centroids, dtype=np.float64).reshape(-1, 2)
    su, sv = pts[:, 0] + pts[:, 1], pts[:, 0] - pts[:, 1]
    order = np.argsort(su, kind="stable")
    u, v = su[order], sv[order]
    pre_max = np.maximum.accumulate(v)
    pre_min = np.minimum.accumulate(v)
    suf_max = np.maximum.accumulate(v[::-1])[::-1]
    suf_min = np.minimum.accumulate(v[::-1])[::-1]
    n = len(u)
    lo = np.searchsorted(u, u, side="left")   # first index with u_j >= u_i
    hi = np.searchsorted(u, u, side="right")  # first index with u_j > u_i
    out = np.ones((n, 4), dtype=bool)
    has_gt = hi < n
    out[has_gt, RIGHT] = ~(suf_max[hi[has_gt]] >= v[has_gt])
    out[:, UP] = ~(pre_max[hi - 1] > v)
    has_lt = lo > 0
    out[has_lt, LEFT] = ~(pre_min[lo[has_lt] - 1] <= v[has_lt])
    out[:, DOWN] = ~(suf_min[lo] < v)
    res = np.empty_like(out)
    res[order] = out
    return res


def direction_neighbors(centroids, k: int = 16) -> np.ndarray:
    """Nearest centroid in each of the four direction cones, self when a cone is empty.

    Distance ties resolve to the lowest index.  A k-d tree supplies candidates;
    a point falls back to an exhaustive scan when a non-empty cone is not
    settled by candidates strictly closer than the furthest one returned.
    """
    pts = np.asarray(centroids, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    rows = np.arange(n)
    if n <= k + 1:
        best, _ = _pick(rows, np.broadcast_to(rows, (n, n)), pts)
    else:
        _, cand = cKDTree(pts).query(pts, k=k + 1)
        best, best_d2 = _pick(rows, cand, pts)
        far = pts[cand[:, -1]] - pts
        radius2 = far[:, 0] ** 2 + far[:, 1] ** 2
        open_cone = np.where(best < 0, ~empty_cones(pts), best_d2 >= radius2[:, None])
        unsettled = np.flatnonzero(open_cone.any(axis=1))
        for start in range(0, len(unsettled), 64):
            chunk = unsettled[start:start + 64]
            best[chunk], _ = _pick(chunk, np.broadcast_to(rows, (len(chunk), n)), pts)
    return np.where(best < 0, rows[:, None], best)


def quarter_bounds(d: int) -> list[tuple[int, int]]:
    """Contiguous channel quarters; the last one takes the remainder."""
    q = d // 4
    return [(0, q), (q, 2 * q), (2 * q, 3 * q), (3 * q, d)]


def shift_table(neighbors: np.ndarray, d: int) -> np.ndarray:
    """Expand an ``n x 4`` neighbor table to the ``n x d`` source-row table."""
    n = neighbors.shape[0]
    table = np.empty((n, d), dtype=np.intp)
    for cone, (lo, hi) in enumerate(quarter_bounds(d)):
        table[:, lo:hi] = neighbors[:, cone:cone + 1]
    return table


def q_shift(x: Tensor, cells: CellSet, mu: float = DEFAULT_MU) -> Tensor:
    """Interpolate each channel quarter of every token with its directional neighbor."""
    if not 0.0 <= mu <= 1.0:
        raise ValueError(f"shift mix {mu} outside [0, 1]")
    x = T.as_tensor(x)
    return T.gather_mix(x, shift_table(cells.neighbors, x.shape[1]), mu)


# ---------------------------------------------------------------------------
# parameters


class ParamGroup:
    """Mixin: enumerate the Tensor-valued dataclass fields."""

    def tensors(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)
                if isinstance(getattr(self, f.name), Tensor)}


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# raw decay value for which softplus(raw) == 1
UNIT_DECAY_RAW = float(np.log(np.e - 1.0))


@dataclass(eq=False)
class SpatialMixParams(ParamGroup):
    W_r: Tensor
    W_k: Tensor
    W_v: Tensor
    decay_raw: Tensor
    bonus: Tensor
    ln_gain: Tensor
    ln_bias: Tensor
    mu: float = DEFAULT_MU

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, mu: float = DEFAULT_MU) -> "SpatialMixParams":
        P = T.parameter
        return cls(P(uniform_init(rng, d, (d, d))), P(uniform_init(rng, d, (d, d))),
                   P(uniform_init(rng, d, (d, d))), P(np.full(d, UNIT_DECAY_RAW)),
                   P(np.zeros(d)), P(np.ones(d)), P(np.zeros(d)), mu)

    def decay(self) -> Tensor:
        return T.softplus(self.decay_raw)


@dataclass(eq=False)
class ChannelMixParams(ParamGroup):
    W_r: Tensor
    W_k: Tensor
    ln_gain: Tensor
    ln_bias: Tensor
    mu: float = DEFAULT_MU

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, mu: float = DEFAULT_MU) -> "ChannelMixParams":
        P = T.parameter
        return cls(P(uniform_init(rng, d, (d, d))), P(uniform_init(rng, d, (d, d))),
                   P(np.ones(d)), P(np.zeros(d)), mu)


@dataclass(eq=False)
class AggrRwkvStack:
    blocks: list[tuple[SpatialMixParams, ChannelMixParams]] = field(default_factory=list)

    @classmethod
    def init(cls, d: int, depth: int, rng: np.random.Generator, mu: float = DEFAULT_MU) -> "AggrRwkvStack":
        if depth < 0:
            raise ValueError("stack depth must be non-negative")
        return cls([(SpatialMixParams.init(d, rng, mu), ChannelMixParams.init(d, rng, mu))
                    for _ in range(depth)])

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for i, (sp, ch) in enumerate(self.blocks):
            out.update({f"block{i}.spatial.{k}": v for k, v in sp.tensors().items()})
            out.update({f"block{i}.channel.{k}": v for k, v in ch.tensors().items()})
        return out


# ---------------------------------------------------------------------------
# blocks


def spatial_mix(H: Tensor, p: SpatialMixParams, cells: CellSet) -> Tensor:
    shifted = q_shift(H, cells, p.mu)
    R = shifted @ p.W_r
    K = shifted @ p.W_k
    V = shifted @ p.W_v
    wkv = bi_wkv_scan(K, V, p.decay(), p.bonus)
    O = T.sigmoid(R) * wkv
    return H + T.layer_norm(O, p.ln_gain, p.ln_bias, LN_EPS)


def channel_mix(Hs: Tensor, p: ChannelMixParams, cells: CellSet) -> Tensor:
    shifted = q_shift(Hs, cells, p.mu)
    O = T.sigmoid(shifted @ p.W_r) * T.squared_relu(shifted @ p.W_k)
    return Hs + T.layer_norm(O, p.ln_gain, p.ln_bias, LN_EPS)


def refine(H: Tensor, stack: AggrRwkvStack, cells: CellSet) -> Tensor:
    """Apply every block to features already in canonical order."""
    for sp, ch in stack.blocks:
        H = channel_mix(spatial_mix(H, sp, cells), ch, cells)
    return H


def run_stack(cells: CellSet, stack: AggrRwkvStack, features: Tensor | None = None
              ) -> tuple[Tensor, np.ndarray]:
    """Canonically order the cells and refine their features.

    Returns the refined rows (canonical order) and the permutation applied to
    the input rows.  ``features`` defaults to ``cells.features``.
    """
    perm = canonical_order(cells)
    ordered = cells.permuted(perm)
    H = T.take_rows(T.as_tensor(cells.features if features is None else features), perm)
    return refine(H, stack, ordered), perm


def aggregate_cells(refined: Tensor) -> Tensor:
    if refined.shape[0] == 0:
        raise EmptyCellSetError("cannot aggregate an empty cell set")
    return T.mean_rows(refined)
