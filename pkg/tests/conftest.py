import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from itcrwkv.aggr import CellSet
from itcrwkv.interaction import TissueTokenGrid
from itcrwkv.model import Model, ModelConfig

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_cells(n, d=4, extent=(64.0, 64.0), seed=0, integer=False):
    rng = np.random.default_rng(seed)
    W, H = extent
    cxy = rng.uniform(4, [W - 4, H - 4], size=(n, 2))
    if integer:
        cxy = np.round(cxy)
    half = rng.uniform(1.0, 3.0, size=(n, 2))
    boxes = np.column_stack([np.maximum(cxy - half, 0), np.minimum(cxy + half, [W, H])])
    return CellSet(rng.normal(size=(n, d)), cxy, boxes, extent)


def make_grid(g=4, d_t=3, patch=16.0, seed=1):
    rng = np.random.default_rng(seed)
    return TissueTokenGrid(rng.normal(size=(g, g, d_t)), rng.normal(size=d_t), patch, (g * patch, g * patch))


def tiny_config(**kw):
    base = dict(d_morph=4, d_tissue=3, width=8, heads=2, depth=2, hidden=8, n_classes=4, dropout=0.1)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def cells8():
    """The 8-cell fixture on a 4x4 grid of 16 px patches."""
    return make_cells(8, d=4, seed=3)


@pytest.fixture
def grid4():
    return make_grid()


@pytest.fixture
def tiny_model():
    return Model.init(tiny_config(), seed=5)


# acceptance criteria report one line each; printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
