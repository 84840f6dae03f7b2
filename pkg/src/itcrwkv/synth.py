"""Synthetic two-scale classification task.

Every sample carries a latent pair ``(cell_bin, context_bin)``:

* ``cell_bin`` sets the mean of morphology channel 0 ("atypia") over the cells;
* ``context_bin`` sets channel 0 of every tissue token touching a cell's
  dilated box.  Tokens away from the cells carry random distractor levels, so
  the global summary token is only a weak cue.

The label is read from a ``C x C`` decision grid over the two bins.  For
``C >= 3`` the grid is ``(cell_bin + [cell_bin == context_bin]) mod C``: the
cell statistic alone is right for a fraction (C-1)/C of the latent pairs, the
context statistic alone for 2/C, and the pair always.  For ``C == 2`` the grid is the
parity checkerboard ``(cell_bin + context_bin) mod 2``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .aggr import CellSet
from .container import read_container, write_container
from .interaction import TissueTokenGrid, roi_cells, roi_pool_all
from .kvfile import read_kv, update_dataclass, write_kv

DATASET_KIND = "dataset"


@dataclass
class SynthConfig:
    seed: int = 0
    n_classes: int = 4
    n_min: int = 8
    n_max: int = 24
    d_morph: int = 8
    d_tissue: int = 8
    grid_h: int = 8
    grid_w: int = 8
    patch_size: int = 16
    morph_signal: float = 1.0
    context_signal: float = 1.0
    noise: float = 0.0
    spread: float = 0.3
    cluster_scale: float = 0.15     # cell scatter, as a fraction of the image side

    def validate(self) -> "SynthConfig":
        problems = []
        if self.n_min < 1 or self.n_max < self.n_min:
            problems.append(f"cell count range [{self.n_min}, {self.n_max}]")
        if self.n_classes < 2:
            problems.append(f"n_classes={self.n_classes}")
        if self.noise < 0 or self.spread < 0:
            problems.append("noise and spread must be non-negative")
        if self.d_morph < 2 or self.d_tissue < 1:
            problems.append("need d_morph >= 2 and d_tissue >= 1")
        if min(self.grid_h, self.grid_w, self.patch_size) < 1:
            problems.append("grid dimensions and patch size must be positive")
        if problems:
            raise ValueError("invalid synth config: " + "; ".join(problems))
        return self

    @property
    def image_extent(self) -> tuple[int, int]:
        return self.grid_w * self.patch_size, self.grid_h * self.patch_size

    @property
    def dilation(self) -> float:
        return float(self.patch_size)


@dataclass(eq=False)
class Sample:
    cells: CellSet
    grid: TissueTokenGrid
    label: int
    provenance: dict = field(default_factory=dict)


def levels(n: int, signal: float) -> np.ndarray:
    return signal * (np.arange(n) - (n - 1) / 2.0)


def to_bin(stat: float, n: int, signal: float) -> int:
    """Index of the nearest level; thresholds sit halfway between levels."""
    return int(np.clip(np.floor(stat / signal + n / 2.0), 0, n - 1))


def decision_rule(cell_bin: int, context_bin: int, n_classes: int) -> int:
    if n_classes == 2:
        return (cell_bin + context_bin) % 2
    return (cell_bin + int(cell_bin == context_bin)) % n_classes


def latent_bins(cfg: SynthConfig, index: int) -> tuple[int, int]:
    """Balanced assignment: each block of C*C consecutive indices covers every pair once."""
    C = cfg.n_classes
    block, pos = divmod(index, C * C)
    perm = np.random.default_rng([cfg.seed, block, 0xB10C]).permutation(C * C)
    return divmod(int(perm[pos]), C)


def generate_one(cfg: SynthConfig, index: int) -> Sample:
    """Sample ``index`` of the dataset; a pure function of ``(cfg, index)``."""
    C = cfg.n_classes
    rng = np.random.default_rng([cfg.seed, index])
    i, j = latent_bins(cfg, index)
    W, H = cfg.image_extent

    n = int(rng.integers(cfg.n_min, cfg.n_max + 1))
    centre = rng.uniform([0.2 * W, 0.2 * H], [0.8 * W, 0.8 * H])
    cxy = centre + rng.normal(scale=cfg.cluster_scale * np.array([W, H]), size=(n, 2))
    cxy = np.clip(cxy, [1.0, 1.0], [W - 1.0, H - 1.0])
    half = rng.uniform(2.0, 6.0, size=(n, 2))
    boxes = np.column_stack([np.maximum(cxy - half, 0.0), np.minimum(cxy + half, [W, H])])

    feats = rng.normal(size=(n, cfg.d_morph))
    e = rng.normal(size=n)
    e = e - e.mean() if n > 1 else np.zeros(1)
    feats[:, 0] = levels(C, cfg.morph_signal)[i] + cfg.spread * e + cfg.noise * rng.normal(size=n)
    feats[:, 1] = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1]) / 50.0
    cells = CellSet(feats, cxy, boxes, (W, H))

    tokens = 0.5 * rng.normal(size=(cfg.grid_h, cfg.grid_w, cfg.d_tissue))
    ctx_levels = levels(C, cfg.context_signal)
    tokens[:, :, 0] = ctx_levels[rng.integers(0, C, size=(cfg.grid_h, cfg.grid_w))]
    near = _near_cells(cfg, boxes)
    tokens[near, 0] = ctx_levels[j] + cfg.noise * rng.normal(size=int(near.sum()))
    grid = TissueTokenGrid(tokens, tokens.mean(axis=(0, 1)), cfg.patch_size, (W, H))

    label = decision_rule(i, j, C)
    sample = Sample(cells, grid, label)
    sample.provenance = {"seed": cfg.seed, "index": index, "cell_bin": i, "context_bin": j,
                         "cell_stat": cell_stat(sample), "context_stat": context_stat(sample, cfg.dilation)}
    return sample


def _near_cells(cfg: SynthConfig, boxes: np.ndarray) -> np.ndarray:
    probe = TissueTokenGrid(np.zeros((cfg.grid_h, cfg.grid_w, 1)), np.zeros(1), cfg.patch_size,
                            cfg.image_extent)
    near = np.zeros((cfg.grid_h, cfg.grid_w), dtype=bool)
    for b in boxes:
        rows, cols = roi_cells(probe, b, cfg.dilation)
        near[rows.start:rows.stop, cols.start:cols.stop] = True
    return near


def generate(cfg: SynthConfig, count: int, start: int = 0) -> list[Sample]:
    cfg.validate()
    if count < 0:
        raise ValueError("count must be non-negative")
    return [generate_one(cfg, k) for k in range(start, start + count)]


def split(cfg: SynthConfig, sizes: tuple[int, ...]) -> list[list[Sample]]:
    """Consecutive, disjoint index ranges (e.g. train/val/test)."""
    out, start = [], 0
    for size in sizes:
        out.append(generate(cfg, size, start))
        start += size
    return out


# ---------------------------------------------------------------------------
# statistics and reference predictors


def cell_stat(sample: Sample) -> float:
    return float(sample.cells.features[:, 0].mean())


def context_stat(sample: Sample, dilation: float) -> float:
    return float(roi_pool_all(sample.grid, sample.cells.boxes, dilation)[:, 0].mean())


def stat_bins(sample: Sample, cfg: SynthConfig) -> tuple[int, int]:
    C = cfg.n_classes
    return (to_bin(cell_stat(sample), C, cfg.morph_signal),
            to_bin(context_stat(sample, cfg.dilation), C, cfg.context_signal))


def joint_rule_accuracy(samples: list[Sample], cfg: SynthConfig) -> float:
    """Accuracy of the analytic rule applied to the observed statistics."""
    hits = [decision_rule(*stat_bins(s, cfg), cfg.n_classes) == s.label for s in samples]
    return float(np.mean(hits))


def best_marginal_accuracy(samples: list[Sample], cfg: SynthConfig, which: str) -> float:
    """Best accuracy of any predictor that sees only one binned statistic."""
    axis = {"cell": 0, "context": 1}[which]
    C = cfg.n_classes
    counts = np.zeros((C, C), dtype=int)
    for s in samples:
        counts[stat_bins(s, cfg)[axis], s.label] += 1
    return float(counts.max(axis=1).sum() / max(len(samples), 1))


# ---------------------------------------------------------------------------
# persistence


def save_dataset(samples: list[Sample], path, cfg: SynthConfig | None = None) -> None:
    arrays = {}
    entries = []
    for k, s in enumerate(samples):
        key = f"{k:06d}"
        arrays[f"{key}/features"] = s.cells.features
        arrays[f"{key}/centroids"] = s.cells.centroids
        arrays[f"{key}/boxes"] = s.cells.boxes
        arrays[f"{key}/tokens"] = s.grid.tokens
        arrays[f"{key}/cls"] = s.grid.cls
        entries.append({"label": s.label, "image_extent": list(s.cells.image_extent),
                        "patch_size": s.grid.patch_size, "provenance": s.provenance})
    meta = {"count": len(samples), "samples": entries}
    if cfg is not None:
        meta["config"] = asdict(cfg)
    write_container(path, DATASET_KIND, arrays, meta)
    if cfg is not None:
        write_kv(str(path) + ".meta", asdict(cfg), "synthetic dataset generator settings")


def load_dataset(path) -> list[Sample]:
    arrays, meta = read_container(path, DATASET_KIND)
    out = []
    for k, e in enumerate(meta["samples"]):
        key = f"{k:06d}"
        cells = CellSet(arrays[f"{key}/features"], arrays[f"{key}/centroids"],
                        arrays[f"{key}/boxes"], tuple(e["image_extent"]))
        grid = TissueTokenGrid(arrays[f"{key}/tokens"], arrays[f"{key}/cls"], e["patch_size"],
                               tuple(e["image_extent"]))
        out.append(Sample(cells, grid, int(e["label"]), e["provenance"]))
    return out


def load_config(path) -> SynthConfig:
    """Read a ``.meta`` sidecar (or any key = value file) into a SynthConfig."""
    return update_dataclass(SynthConfig(), read_kv(path)).validate()


def dataset_config(path) -> SynthConfig | None:
    _, meta = read_container(path, DATASET_KIND)
    cfg = meta.get("config")
    return SynthConfig(**cfg) if cfg else None


def samples_equal(a: Sample, b: Sample) -> bool:
    pairs = [(a.cells.features, b.cells.features), (a.cells.centroids, b.cells.centroids),
             (a.cells.boxes, b.cells.boxes), (a.grid.tokens, b.grid.tokens), (a.grid.cls, b.grid.cls)]
    return (a.label == b.label and a.cells.image_extent == b.cells.image_extent
            and a.grid.patch_size == b.grid.patch_size
            and all(x.shape == y.shape and x.tobytes() == y.tobytes() for x, y in pairs))


def default_path(directory, name: str = "dataset.bin") -> Path:
    return Path(directory) / name
