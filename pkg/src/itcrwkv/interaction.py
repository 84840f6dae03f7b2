"""Tissue-cell interaction: ROI alignment, dual cross-attention, fusion and the head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .aggr import ParamGroup, uniform_init
from .tensor import Tensor

FUSIONS = ("gated", "average", "add", "film", "concat")


@dataclass(eq=False)
class TissueTokenGrid:
    """Patch-token embeddings ``(g_h, g_w, d_t)`` plus the global summary token."""

    tokens: np.ndarray
    cls: np.ndarray
    patch_size: float
    image_extent: tuple[float, float]

    def __post_init__(self):
        self.tokens = np.ascontiguousarray(self.tokens, dtype=np.float64)
        self.cls = np.ascontiguousarray(self.cls, dtype=np.float64)
        self.image_extent = (float(self.image_extent[0]), float(self.image_extent[1]))
        if self.tokens.ndim != 3 or self.cls.shape != (self.tokens.shape[2],):
            raise ValueError(f"token grid {self.tokens.shape} with summary {self.cls.shape}")
        g_h, g_w, _ = self.tokens.shape
        w, h = self.image_extent
        if g_w * self.patch_size < w or g_h * self.patch_size < h:
            raise ValueError(f"{g_h}x{g_w} grid of {self.patch_size}px patches does not cover {w}x{h}")

    @property
    def width(self) -> int:
        return self.tokens.shape[2]


def _axis_span(lo: float, hi: float, patch: float, count: int) -> range:
    """Token indices along one axis whose footprint meets ``[lo, hi]``.

    A positive-length interval must overlap a footprint with positive length; a
    zero-length interval is a point, located in the half-open footprint.
    ``count`` is the number of tokens needed to cover the image along the axis.
    """
    if hi > lo:
        first = int(np.floor(lo / patch))
        last = int(np.ceil(hi / patch)) - 1
    else:
        first = last = int(np.floor(lo / patch))
    first = min(max(first, 0), count - 1)
    last = min(max(last, first), count - 1)
    return range(first, last + 1)


def roi_cells(grid: TissueTokenGrid, box, dilation: float) -> tuple[range, range]:
    """Rows and columns of the tokens met by ``box`` grown by ``dilation``.

    The grown box is clipped to the image, so grid padding beyond the image
    never contributes.
    """
    if dilation < 0:
        raise ValueError("dilation must be non-negative")
    x0, y0, x1, y1 = (float(v) for v in box)
    w, h = grid.image_extent
    p = grid.patch_size
    rows = _axis_span(max(y0 - dilation, 0.0), min(y1 + dilation, h), p, max(int(np.ceil(h / p)), 1))
    cols = _axis_span(max(x0 - dilation, 0.0), min(x1 + dilation, w), p, max(int(np.ceil(w / p)), 1))
    return rows, cols


def roi_pool(grid: TissueTokenGrid, box, dilation: float = 0.0) -> np.ndarray:
    """Mean of the tokens whose patch footprint intersects the dilated box."""
    rows, cols = roi_cells(grid, box, dilation)
    return grid.tokens[rows.start:rows.stop, cols.start:cols.stop].mean(axis=(0, 1))


def roi_pool_all(grid: TissueTokenGrid, boxes, dilation: float = 0.0) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.stack([roi_pool(grid, b, dilation) for b in boxes])


# ---------------------------------------------------------------------------
# attention


@dataclass(eq=False)
class AttentionParams(ParamGroup):
    W_q: Tensor
    W_k: Tensor
    W_v: Tensor
    W_o: Tensor
    heads: int = 1

    @classmethod
    def init(cls, d: int, heads: int, rng: np.random.Generator) -> "AttentionParams":
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        P = T.parameter
        return cls(*(P(uniform_init(rng, d, (d, d))) for _ in range(4)), heads=heads)

    @classmethod
    def identity(cls, d: int, heads: int = 1) -> "AttentionParams":
        return cls(*(T.parameter(np.eye(d)) for _ in range(4)), heads=heads)


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    m, d = x.shape
    return x.reshape(m, heads, d // heads).transpose(1, 0, 2)


def multi_head_attention(Q: Tensor, K: Tensor, V: Tensor, heads: int) -> tuple[Tensor, np.ndarray]:
    """Scaled dot-product attention over already projected rows.

    Returns the concatenated head outputs ``(m, d)`` and the attention weights
    ``(heads, m, n)``.  Implemented as one tape record.
    """
    qd, kd, vd = Q.data, K.data, V.data
    if qd.ndim != 2 or kd.shape != vd.shape or kd.shape[1] != qd.shape[1] or kd.shape[0] < 1:
        raise T.ShapeError(f"attention shapes Q{qd.shape} K{kd.shape} V{vd.shape}")
    m, d = qd.shape
    dh = d // heads
    scale = 1.0 / np.sqrt(dh)
    Qh, Kh, Vh = (_split_heads(a, heads) for a in (qd, kd, vd))
    S = np.einsum("hmk,hnk->hmn", Qh, Kh) * scale
    S -= S.max(axis=-1, keepdims=True)
    A = np.exp(S)
    A /= A.sum(axis=-1, keepdims=True)
    O = np.einsum("hmn,hnk->hmk", A, Vh)
    out = O.transpose(1, 0, 2).reshape(m, d)

    def back(g):
        gO = _split_heads(g, heads)
        dA = np.einsum("hmk,hnk->hmn", gO, Vh)
        dV = np.einsum("hmn,hmk->hnk", A, gO)
        dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) * scale
        dQ = np.einsum("hmn,hnk->hmk", dS, Kh)
        dK = np.einsum("hmn,hmk->hnk", dS, Qh)
        merge = lambda x: x.transpose(1, 0, 2).reshape(x.shape[1], d)
        return merge(dQ), merge(dK), merge(dV)

    return T.custom("attention", out, (Q, K, V), back), A


def cross_attention(q: Tensor, keys: Tensor, values: Tensor, p: AttentionParams
                    ) -> tuple[Tensor, np.ndarray]:
    """Attend from query row(s) ``q`` over ``keys``/``values``.

    A 1-D ``q`` yields a 1-D output.  The weights are returned per head.
    """
    q = T.as_tensor(q)
    single = q.ndim == 1
    if single:
        q = T.reshape(q, (1, q.shape[0]))
    heads_out, A = multi_head_attention(q @ p.W_q, T.as_tensor(keys) @ p.W_k,
                                        T.as_tensor(values) @ p.W_v, p.heads)
    out = heads_out @ p.W_o
    if single:
        out = T.reshape(out, (out.shape[1],))
        A = A[:, 0, :]
    return out, A


@dataclass
class DualAttention:
    cell: Tensor          # cells enriched by tissue context
    tissue: Tensor        # tissue contexts enriched by cells
    cell_to_tissue: np.ndarray   # (heads, n, n) weights, query = cell
    tissue_to_cell: np.ndarray


def dual_cross_attention(cell_feats: Tensor, tissue_ctx: Tensor,
                         c2t: AttentionParams, t2c: AttentionParams) -> DualAttention:
    """Both directions read the un-attended inputs as keys and values."""
    h_tilde, a_ct = cross_attention(cell_feats, tissue_ctx, tissue_ctx, c2t)
    r_tilde, a_tc = cross_attention(tissue_ctx, cell_feats, cell_feats, t2c)
    return DualAttention(h_tilde, r_tilde, a_ct, a_tc)


def tissue_summary(r_tilde: Tensor, cls: Tensor) -> Tensor:
    """Projected summary token plus the mean of the cell-aware tissue contexts."""
    return T.add(cls, T.mean_rows(r_tilde))


def gated_fusion(c: Tensor, t: Tensor, W_g: Tensor) -> Tensor:
    g = T.sigmoid(W_g @ T.concat([c, t]))
    return T.convex_mix(g, c, t)


@dataclass(eq=False)
class FusionParams(ParamGroup):
    W_g: Tensor | None = None
    W_gamma: Tensor | None = None
    W_beta: Tensor | None = None

    @classmethod
    def init(cls, kind: str, d: int, rng: np.random.Generator) -> "FusionParams":
        if kind not in FUSIONS:
            raise ValueError(f"unknown fusion {kind!r}; expected one of {', '.join(FUSIONS)}")
        if kind == "gated":
            # zero gate logits start at the unbiased midpoint (c + t) / 2
            return cls(W_g=T.parameter(np.zeros((d, 2 * d))))
        if kind == "film":
            return cls(W_gamma=T.parameter(np.zeros((d, d))), W_beta=T.parameter(np.zeros((d, d))))
        return cls()


def fuse(kind: str, c: Tensor, t: Tensor, p: FusionParams) -> Tensor:
    if kind == "gated":
        return gated_fusion(c, t, p.W_g)
    if kind == "average":
        return T.scale(T.add(c, t), 0.5)
    if kind == "add":
        return T.add(c, t)
    if kind == "film":
        # tissue modulates the cellular vector: c * (1 + gamma(t)) + beta(t)
        return c + c * (p.W_gamma @ t) + p.W_beta @ t
    if kind == "concat":
        return T.concat([c, t])
    raise ValueError(f"unknown fusion {kind!r}")


# ---------------------------------------------------------------------------
# classification head


@dataclass(eq=False)
class ClassifierParams(ParamGroup):
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor
    dropout: float = 0.1

    @classmethod
    def init(cls, d_in: int, d_hidden: int, n_classes: int, rng: np.random.Generator,
             dropout: float = 0.1) -> "ClassifierParams":
        P = T.parameter
        return cls(P(uniform_init(rng, d_in, (d_hidden, d_in))), P(np.zeros(d_hidden)),
                   P(uniform_init(rng, d_hidden, (n_classes, d_hidden))), P(np.zeros(n_classes)),
                   dropout)


@dataclass
class Prediction:
    logits: Tensor
    probs: np.ndarray
    fused: Tensor

    @property
    def label(self) -> int:
        return int(np.argmax(self.probs))


def classify(z: Tensor, p: ClassifierParams, training: bool = False,
             rng: np.random.Generator | None = None) -> Prediction:
    hidden = T.relu(p.W1 @ z + p.b1)
    if training and p.dropout > 0:
        if rng is None:
            raise ValueError("training mode needs a random generator for dropout")
        hidden = T.dropout(hidden, p.dropout, rng)
    logits = p.W2 @ hidden + p.b2
    with T.no_grad():
        probs = T.softmax(T.Tensor(logits.data)).data
    return Prediction(logits, probs, z)
