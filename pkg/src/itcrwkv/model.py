"""The dual-stream classifier: cell encoder, aggregator, interaction and head."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .aggr import AggrRwkvStack, CellSet, ParamGroup, aggregate_cells, canonicalize, refine, uniform_init
from .baselines import (MeanPoolParams, SelfAttentionParams, check_kind, mean_pool_aggregate,
                        self_attention_aggregate)
from .interaction import (AttentionParams, ClassifierParams, FusionParams, Prediction, TissueTokenGrid,
                          classify, dual_cross_attention, fuse, roi_pool_all, tissue_summary)
from .tensor import Tensor

BRANCHES = ("both", "cell", "tissue")
ATTENTION_SOURCES = ("cell_to_tissue", "tissue_to_cell")


@dataclass
class ModelConfig:
    d_morph: int = 8
    d_tissue: int = 8
    width: int = 256
    heads: int = 4
    depth: int = 4
    hidden: int = 128
    n_classes: int = 4
    dropout: float = 0.1
    mu: float = 0.5
    dilation: float | None = None   # pixels; None means one patch side
    aggregator: str = "rwkv"
    fusion: str = "gated"
    branches: str = "both"

    def validate(self) -> "ModelConfig":
        check_kind(self.aggregator)
        if self.branches not in BRANCHES:
            raise ValueError(f"unknown branches {self.branches!r}; valid: {', '.join(BRANCHES)}")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.n_classes < 2 or self.depth < 0 or not 0 <= self.dropout < 1:
            raise ValueError(f"invalid model config {self}")
        return self


@dataclass(eq=False)
class Dense(ParamGroup):
    W: Tensor
    b: Tensor

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: np.random.Generator) -> "Dense":
        return cls(T.parameter(uniform_init(rng, d_in, (d_in, d_out))), T.parameter(np.zeros(d_out)))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.W + self.b


@dataclass(eq=False)
class Model:
    cfg: ModelConfig
    enc1: Dense
    enc2: Dense
    tissue_proj: Dense
    cls_proj: Dense
    c2t: AttentionParams
    t2c: AttentionParams
    fusion: FusionParams
    head: ClassifierParams
    stack: AggrRwkvStack = field(default_factory=AggrRwkvStack)
    self_attn: SelfAttentionParams | None = None
    pool: MeanPoolParams | None = None

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "Model":
        cfg.validate()
        rng = np.random.default_rng(seed)
        d = cfg.width
        model = cls(
            cfg,
            enc1=Dense.init(cfg.d_morph, d, rng),
            enc2=Dense.init(d, d, rng),
            tissue_proj=Dense.init(cfg.d_tissue, d, rng),
            cls_proj=Dense.init(cfg.d_tissue, d, rng),
            c2t=AttentionParams.init(d, cfg.heads, rng),
            t2c=AttentionParams.init(d, cfg.heads, rng),
            fusion=FusionParams.init(cfg.fusion, d, rng),
            head=ClassifierParams.init(2 * d if cfg.fusion == "concat" and cfg.branches == "both" else d,
                                       cfg.hidden, cfg.n_classes, rng, cfg.dropout),
        )
        if cfg.aggregator == "rwkv":
            model.stack = AggrRwkvStack.init(d, cfg.depth, rng, cfg.mu)
        elif cfg.aggregator == "self_attention":
            model.self_attn = SelfAttentionParams.init(d, cfg.heads, rng)
        else:
            model.pool = MeanPoolParams.init(d, rng)
        return model

    def parameters(self) -> dict[str, Tensor]:
        """Every trainable tensor, keyed by a stable dotted name."""
        groups = {"enc1": self.enc1, "enc2": self.enc2, "tissue_proj": self.tissue_proj,
                  "cls_proj": self.cls_proj, "c2t": self.c2t, "t2c": self.t2c,
                  "fusion": self.fusion, "head": self.head, "stack": self.stack,
                  "self_attn": self.self_attn, "pool": self.pool}
        out = {}
        for prefix, g in groups.items():
            if g is None:
                continue
            for k, v in g.tensors().items():
                out[f"{prefix}.{k}"] = v
        return out

    def config_dict(self) -> dict:
        return asdict(self.cfg)


@dataclass
class ForwardResult:
    prediction: Prediction
    cells: CellSet                 # canonical order
    perm: np.ndarray               # canonical position -> input index
    cell_attention: np.ndarray     # per-cell attention mass, canonical order, sums to 1
    tissue_attention: np.ndarray

    def attention_in_input_order(self, source: str = "cell_to_tissue") -> np.ndarray:
        mass = self.cell_attention if source == "cell_to_tissue" else self.tissue_attention
        out = np.empty_like(mass)
        out[self.perm] = mass
        return out


def encode_cells(model: Model, features) -> Tensor:
    return model.enc2(T.relu(model.enc1(T.as_tensor(features))))


def cell_stage(model: Model, H: Tensor, cells: CellSet) -> Tensor:
    """Per-cell refinement for the configured aggregator (identity for mean pooling)."""
    kind = model.cfg.aggregator
    if kind == "rwkv":
        return refine(H, model.stack, cells)
    if kind == "self_attention":
        return self_attention_aggregate(H, model.self_attn)
    return H


def pool_cells(model: Model, H: Tensor) -> Tensor:
    if model.cfg.aggregator == "mean_pool":
        return mean_pool_aggregate(H, model.pool)
    return aggregate_cells(H)


def dilation_of(model: Model, grid: TissueTokenGrid) -> float:
    return grid.patch_size if model.cfg.dilation is None else float(model.cfg.dilation)


def forward_model(model: Model, cells: CellSet, grid: TissueTokenGrid, training: bool = False,
                  rng: np.random.Generator | None = None) -> ForwardResult:
    """Run the whole pipeline on one sample.

    Cells are put in canonical order first, so every later stage sees the same
    rows regardless of how the input was ordered.
    """
    cfg = model.cfg
    cells, perm = canonicalize(cells)
    n = cells.n
    uniform = np.full(n, 1.0 / n)
    cell_mass = tissue_mass = uniform

    R = model.tissue_proj(T.Tensor(roi_pool_all(grid, cells.boxes, dilation_of(model, grid))))
    cls = model.cls_proj(T.Tensor(grid.cls))

    if cfg.branches == "tissue":
        z = tissue_summary(R, cls)
    else:
        H = cell_stage(model, encode_cells(model, cells.features), cells)
        if cfg.branches == "cell":
            z = pool_cells(model, H)
        else:
            dual = dual_cross_attention(H, R, model.c2t, model.t2c)
            c = pool_cells(model, dual.cell)
            t = tissue_summary(dual.tissue, cls)
            z = fuse(cfg.fusion, c, t, model.fusion)
            # mass each cell's tissue context receives, averaged over queries and heads
            cell_mass = dual.cell_to_tissue.mean(axis=(0, 1))
            tissue_mass = dual.tissue_to_cell.mean(axis=(0, 1))
    pred = classify(z, model.head, training, rng)
    return ForwardResult(pred, cells, perm, cell_mass, tissue_mass)


def sample_loss(model: Model, cells: CellSet, grid: TissueTokenGrid, label: int,
                training: bool = False, rng: np.random.Generator | None = None) -> tuple[Tensor, ForwardResult]:
    res = forward_model(model, cells, grid, training, rng)
    return T.cross_entropy(res.prediction.logits, label), res
