import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from itcrwkv.container import CorruptFileError, VersionError
from itcrwkv.synth import (SynthConfig, dataset_config, decision_rule, generate, generate_one,
                           joint_rule_accuracy, best_marginal_accuracy, latent_bins, load_config,
                           load_dataset, samples_equal, save_dataset, split, to_bin, levels)


@pytest.fixture(scope="module")
def ds4():
    cfg = SynthConfig(seed=3)
    return cfg, generate(cfg, 160)


def test_same_seed_same_samples():
    cfg = SynthConfig(seed=11)
    a, b = generate(cfg, 6), generate(cfg, 6)
    assert all(samples_equal(x, y) for x, y in zip(a, b))
    c = generate(SynthConfig(seed=12), 6)
    assert not all(samples_equal(x, y) for x, y in zip(a, c))


def test_sample_is_function_of_index():
    cfg = SynthConfig(seed=2)
    assert samples_equal(generate(cfg, 5)[4], generate_one(cfg, 4))
    tr, va = split(cfg, (3, 2))
    assert samples_equal(va[0], generate_one(cfg, 3))


def test_balanced_latent_pairs():
    cfg = SynthConfig(seed=5, n_classes=3)
    pairs = [latent_bins(cfg, k) for k in range(18)]
    assert sorted(pairs[:9]) == [(i, j) for i in range(3) for j in range(3)]
    assert sorted(pairs[9:]) == sorted(pairs[:9])


def test_decision_grid_examples():
    assert [decision_rule(i, j, 2) for i in range(2) for j in range(2)] == [0, 1, 1, 0]
    assert decision_rule(1, 1, 4) == 2 and decision_rule(1, 2, 4) == 1 and decision_rule(3, 3, 4) == 0


@pytest.mark.parametrize("C", [3, 4, 5, 7])
def test_grid_marginals_by_enumeration(C):
    grid = np.array([[decision_rule(i, j, C) for j in range(C)] for i in range(C)])
    rows = sum(np.bincount(r, minlength=C).max() for r in grid) / C ** 2
    cols = sum(np.bincount(c, minlength=C).max() for c in grid.T) / C ** 2
    assert rows == pytest.approx((C - 1) / C) and rows <= 1 - 1 / C + 1e-12
    assert cols == pytest.approx(2 / C)
    assert sorted(np.bincount(grid.ravel(), minlength=C)) == [C] * C


@given(st.integers(2, 9), st.floats(0.2, 3.0), st.data())
def test_to_bin_inverts_levels(C, signal, data):
    k = data.draw(st.integers(0, C - 1))
    jitter = data.draw(st.floats(-0.49, 0.49))
    assert to_bin(levels(C, signal)[k] + jitter * signal, C, signal) == k


def test_noise_free_rule_is_exact_and_marginals_are_weak(ds4):
    cfg, samples = ds4
    assert joint_rule_accuracy(samples, cfg) == 1.0
    cell = best_marginal_accuracy(samples, cfg, "cell")
    ctx = best_marginal_accuracy(samples, cfg, "context")
    assert cell <= 0.75 and ctx <= 0.5
    assert 1.0 - max(cell, ctx) >= 0.15


def test_two_class_parity_task():
    cfg = SynthConfig(seed=1, n_classes=2)
    samples = generate(cfg, 40)
    assert joint_rule_accuracy(samples, cfg) == 1.0
    assert best_marginal_accuracy(samples, cfg, "cell") <= 0.5
    assert best_marginal_accuracy(samples, cfg, "context") <= 0.5


def test_sample_shapes_and_bounds(ds4):
    cfg, samples = ds4
    W, H = cfg.image_extent
    for s in samples[:20]:
        n = s.cells.features.shape[0]
        assert cfg.n_min <= n <= cfg.n_max
        assert s.cells.features.shape == (n, cfg.d_morph)
        b = s.cells.boxes
        assert np.all(b[:, 0] >= 0) and np.all(b[:, 2] <= W) and np.all(b[:, 1] >= 0) and np.all(b[:, 3] <= H)
        assert s.grid.tokens.shape == (cfg.grid_h, cfg.grid_w, cfg.d_tissue)
        assert 0 <= s.label < cfg.n_classes


def test_round_trip_is_bit_exact(tmp_path):
    cfg = SynthConfig(seed=4, noise=0.1)
    samples = generate(cfg, 5)
    path = tmp_path / "d.bin"
    save_dataset(samples, path, cfg)
    back = load_dataset(path)
    assert len(back) == 5 and all(samples_equal(a, b) for a, b in zip(samples, back))
    assert back[2].provenance["index"] == 2
    assert dataset_config(path) == cfg
    assert load_config(str(path) + ".meta") == cfg


def test_truncated_file_rejected(tmp_path):
    path = tmp_path / "d.bin"
    save_dataset(generate(SynthConfig(), 2), path)
    blob = path.read_bytes()
    for cut in (4, 30, len(blob) - 8):
        (tmp_path / "t.bin").write_bytes(blob[:cut])
        with pytest.raises(CorruptFileError):
            load_dataset(tmp_path / "t.bin")


def test_version_mismatch_names_both_versions(tmp_path):
    path = tmp_path / "d.bin"
    save_dataset(generate(SynthConfig(), 1), path)
    blob = bytearray(path.read_bytes())
    blob[8:12] = (7).to_bytes(4, "little")
    path.write_bytes(bytes(blob))
    with pytest.raises(VersionError, match=r"version 7.*expected 1"):
        load_dataset(path)


def test_invalid_config():
    with pytest.raises(ValueError, match="cell count"):
        SynthConfig(n_min=5, n_max=3).validate()
    with pytest.raises(ValueError):
        generate(SynthConfig(n_classes=1), 1)
