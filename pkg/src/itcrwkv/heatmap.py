"""Cell influence maps: splat per-cell attention, blur, normalize, colorize, overlay."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from ._viridis import VIRIDIS
from .aggr import CellSet
from .interaction import TissueTokenGrid

COLORMAPS = {"viridis": VIRIDIS}
FORMATS = ("ppm", "csv")
TRUNCATE = 3.0      # kernel radius in units of sigma


@dataclass
class ImportanceMapConfig:
    sigma: float = 15.0       # pixels
    alpha: float = 0.6
    colormap: str = "viridis"
    fmt: str = "ppm"
    source: str = "cell_to_tissue"

    def validate(self) -> "ImportanceMapConfig":
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.colormap not in COLORMAPS:
            raise ValueError(f"unknown colormap {self.colormap!r}; valid: {', '.join(COLORMAPS)}")
        if self.fmt not in FORMATS:
            raise ValueError(f"unknown format {self.fmt!r}; valid: {', '.join(FORMATS)}")
        if self.source not in ("cell_to_tissue", "tissue_to_cell"):
            raise ValueError(f"unknown attention source {self.source!r}")
        return self


@dataclass
class ImportanceMap:
    image: np.ndarray     # (H, W, 3) uint8 overlay
    field: np.ndarray     # (H, W) normalized to [0, 1]
    raw: np.ndarray       # (H, W) smoothed mass before normalization


def gaussian_kernel(sigma: float, truncate: float = TRUNCATE) -> np.ndarray:
    """1-D Gaussian cut at ``truncate * sigma`` and renormalized to unit sum."""
    radius = int(truncate * sigma + 0.5)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_kernel_2d(sigma: float, truncate: float = TRUNCATE) -> np.ndarray:
    k = gaussian_kernel(sigma, truncate)
    return np.outer(k, k)


def pixel_of(xy, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Row and column of the pixel containing each point, clipped to the image."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    H, W = shape
    col = np.clip(np.floor(xy[:, 0]).astype(int), 0, W - 1)
    row = np.clip(np.floor(xy[:, 1]).astype(int), 0, H - 1)
    return row, col


def splat(centroids, mass, shape: tuple[int, int]) -> np.ndarray:
    field = np.zeros(shape)
    row, col = pixel_of(centroids, shape)
    np.add.at(field, (row, col), np.asarray(mass, dtype=np.float64))
    return field


def smooth(field: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with zero padding (mass past the border is dropped)."""
    k = gaussian_kernel(sigma)
    out = correlate1d(field, k, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, k, axis=1, mode="constant", cval=0.0)


def normalize(field: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant field carries no signal and maps to zeros."""
    lo, hi = float(field.min()), float(field.max())
    if hi <= lo:
        return np.zeros_like(field)
    return np.clip((field - lo) / (hi - lo), 0.0, 1.0)


def colorize(field: np.ndarray, colormap: str = "viridis") -> np.ndarray:
    lut = COLORMAPS[colormap]
    idx = np.clip(np.rint(field * 255.0), 0, 255).astype(np.intp)
    return lut[idx]


def render_sample(cells: CellSet, grid: TissueTokenGrid) -> np.ndarray:
    """Stain-like base image: tissue tokens as pink patches, cells as dark outlines."""
    W, H = (int(np.ceil(v)) for v in cells.image_extent)
    ch = grid.tokens[:, :, 0]
    span = ch.max() - ch.min()
    shade = (ch - ch.min()) / span if span > 0 else np.zeros_like(ch)
    gr = np.minimum((np.arange(H) + 0.5) // grid.patch_size, ch.shape[0] - 1).astype(int)
    gc = np.minimum((np.arange(W) + 0.5) // grid.patch_size, ch.shape[1] - 1).astype(int)
    tile = shade[np.ix_(gr, gc)]
    base = np.empty((H, W, 3))
    base[..., 0] = 235 - 35 * tile
    base[..., 1] = 200 - 90 * tile
    base[..., 2] = 225 - 45 * tile
    for x0, y0, x1, y1 in cells.boxes:
        c0, c1 = int(np.floor(x0)), min(int(np.ceil(x1)), W) - 1
        r0, r1 = int(np.floor(y0)), min(int(np.ceil(y1)), H) - 1
        if c1 < c0 or r1 < r0:
            continue
        for r in (r0, r1):
            base[r, c0:c1 + 1] = (70, 40, 120)
        for c in (c0, c1):
            base[r0:r1 + 1, c] = (70, 40, 120)
    return np.rint(base).astype(np.uint8)


def render_importance(cells: CellSet, grid: TissueTokenGrid, mass, cfg: ImportanceMapConfig | None = None
                      ) -> ImportanceMap:
    """Influence map of one sample from per-cell attention ``mass`` (aligned with ``cells``)."""
    cfg = (cfg or ImportanceMapConfig()).validate()
    mass = np.asarray(mass, dtype=np.float64)
    if cells.n < 1:
        raise ValueError("need at least one cell")
    if mass.shape != (cells.n,):
        raise ValueError(f"attention mass shape {mass.shape} does not match {cells.n} cells")
    W, H = (int(np.ceil(v)) for v in cells.image_extent)
    raw = smooth(splat(cells.centroids, mass, (H, W)), cfg.sigma)
    field = normalize(raw)
    heat = colorize(field, cfg.colormap).astype(np.float64)
    base = render_sample(cells, grid).astype(np.float64)
    image = np.rint((1.0 - cfg.alpha) * base + cfg.alpha * heat).astype(np.uint8)
    return ImportanceMap(image, field, raw)


def write_ppm(path, image: np.ndarray) -> None:
    """Binary portable pixmap (P6, maxval 255)."""
    image = np.ascontiguousarray(image, dtype=np.uint8)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {image.shape}")
    H, W, _ = image.shape
    Path(path).write_bytes(f"P6\n{W} {H}\n255\n".encode("ascii") + image.tobytes())


def read_ppm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P6" or len(parts) < 4:
        raise ValueError(f"{path}: not a binary P6 file")
    W, H = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(H, W, 3)


def write_field_csv(path, field: np.ndarray) -> None:
    np.savetxt(path, field, delimiter=",", fmt="%.6f")
