import hashlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from itcrwkv.aggr import CellSet
from itcrwkv.heatmap import (ImportanceMapConfig, colorize, gaussian_kernel, gaussian_kernel_2d, normalize,
                             read_ppm, render_importance, smooth, splat, write_field_csv, write_ppm)
from itcrwkv.interaction import TissueTokenGrid
from itcrwkv.model import Model, forward_model
from itcrwkv.synth import SynthConfig, generate_one

from conftest import tiny_config

GOLDEN_SHA256 = "bd0798da59be1ab1c9292183573d5704d110a7e4d8e8f1eb4792de076924d33d"


def cells_at(points, extent=(256, 256)):
    pts = np.asarray(points, dtype=float)
    boxes = np.column_stack([np.maximum(pts - 2, 0), np.minimum(pts + 2, extent)])
    return CellSet(np.zeros((len(pts), 2)), pts, boxes, extent)


def blank_grid(extent=(256, 256), patch=16):
    return TissueTokenGrid(np.zeros((extent[1] // patch, extent[0] // patch, 2)), np.zeros(2), patch, extent)


@pytest.mark.parametrize("sigma", [0.5, 1.0, 2.5, 15.0, 40.0])
def test_kernel_normalized(sigma):
    k = gaussian_kernel(sigma)
    assert abs(k.sum() - 1.0) < 1e-10
    assert abs(gaussian_kernel_2d(sigma).sum() - 1.0) < 1e-10
    assert len(k) == 2 * int(3 * sigma + 0.5) + 1
    assert np.array_equal(k, k[::-1]) and k.argmax() == len(k) // 2


def test_single_cell_peak_at_centroid_pixel():
    cells = cells_at([[100.7, 60.2]])
    m = render_importance(cells, blank_grid(), [1.0])
    assert np.unravel_index(m.raw.argmax(), m.raw.shape) == (60, 100)
    assert m.field[60, 100] == 1.0


def test_equal_mass_constant_field_maps_to_zero():
    assert not normalize(np.full((4, 5), 0.3)).any()
    # a one-pixel image: whatever the mass, the blurred field is constant
    cells = cells_at([[0.5, 0.5]], extent=(1, 1))
    grid = TissueTokenGrid(np.zeros((1, 1, 1)), np.zeros(1), 1, (1, 1))
    m = render_importance(cells, grid, [1.0])
    assert m.raw[0, 0] == pytest.approx(gaussian_kernel(15.0).max() ** 2)
    assert not m.field.any()


def test_two_cells_keep_nine_to_one_ratio():
    cells = cells_at([[40.0, 40.0], [200.0, 200.0]])
    m = render_importance(cells, blank_grid(), [0.9, 0.1])
    assert m.raw[40, 40] / m.raw[200, 200] == pytest.approx(9.0, rel=1e-12)
    k = gaussian_kernel(15.0)
    assert m.raw[40, 40] == pytest.approx(0.9 * k.max() ** 2, rel=1e-12)


@given(st.lists(st.tuples(st.floats(60, 195), st.floats(60, 195), st.floats(0.01, 1.0)), min_size=1, max_size=6))
def test_interior_mass_conserved(cells):
    pts = [(x, y) for x, y, _ in cells]
    mass = np.array([w for _, _, w in cells])
    mass /= mass.sum()
    raw = smooth(splat(pts, mass, (256, 256)), 15.0)
    assert abs(raw.sum() - 1.0) < 1e-4


def test_field_bounds_and_csv(tmp_path):
    s = generate_one(SynthConfig(seed=1), 3)
    mass = np.random.default_rng(0).dirichlet(np.ones(s.cells.n))
    m = render_importance(s.cells, s.grid, mass)
    path = tmp_path / "f.csv"
    write_field_csv(path, m.field)
    back = np.loadtxt(path, delimiter=",")
    assert back.shape == m.field.shape and back.min() >= 0.0 and back.max() <= 1.0
    assert back.max() == 1.0 and back.min() == 0.0


def test_colormap_endpoints():
    lut = colorize(np.array([[0.0, 1.0]]))
    assert lut[0, 0].tolist() == [68, 1, 84] and lut[0, 1].tolist() == [253, 231, 37]


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(2).integers(0, 256, size=(7, 5, 3), dtype=np.uint8)
    write_ppm(tmp_path / "x.ppm", img)
    assert (tmp_path / "x.ppm").read_bytes().startswith(b"P6\n5 7\n255\n")
    assert np.array_equal(read_ppm(tmp_path / "x.ppm"), img)


def test_golden_ppm(tmp_path):
    s = generate_one(SynthConfig(), 0)
    m = render_importance(s.cells, s.grid, np.full(s.cells.n, 1.0 / s.cells.n))
    write_ppm(tmp_path / "g.ppm", m.image)
    assert hashlib.sha256((tmp_path / "g.ppm").read_bytes()).hexdigest() == GOLDEN_SHA256


def test_model_driven_map_is_stable(tmp_path):
    s = generate_one(SynthConfig(d_morph=4, d_tissue=3), 1)
    model = Model.init(tiny_config(), seed=0)
    blobs = []
    for k in range(2):
        res = forward_model(model, s.cells, s.grid)
        m = render_importance(s.cells, s.grid, res.attention_in_input_order())
        write_ppm(tmp_path / f"{k}.ppm", m.image)
        blobs.append((tmp_path / f"{k}.ppm").read_bytes())
    assert blobs[0] == blobs[1]


def test_config_validation():
    for bad in (dict(sigma=0.0), dict(alpha=1.5), dict(colormap="jet"), dict(fmt="png")):
        with pytest.raises(ValueError):
            ImportanceMapConfig(**bad).validate()
    with pytest.raises(ValueError, match="does not match"):
        render_importance(cells_at([[5.0, 5.0]]), blank_grid(), [0.5, 0.5])
