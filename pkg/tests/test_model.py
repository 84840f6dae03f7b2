import numpy as np
import pytest

from conftest import make_cells, make_grid, tiny_config
from itcrwkv import tensor as T
from itcrwkv.aggr import aggregate_cells, canonicalize, refine
from itcrwkv.interaction import classify, dual_cross_attention, fuse, roi_pool_all, tissue_summary
from itcrwkv.model import Model, ModelConfig, encode_cells, forward_model, sample_loss


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(width=10, heads=4).validate()
    with pytest.raises(ValueError, match="valid"):
        ModelConfig(aggregator="bogus").validate()
    with pytest.raises(ValueError):
        ModelConfig(branches="neither").validate()


def test_forward_equals_chained_ops(cells8, grid4, tiny_model):
    m = tiny_model
    res = forward_model(m, cells8, grid4)
    cells, perm = canonicalize(cells8)
    H = refine(encode_cells(m, cells.features), m.stack, cells)
    R = m.tissue_proj(T.Tensor(roi_pool_all(grid4, cells.boxes, grid4.patch_size)))
    dual = dual_cross_attention(H, R, m.c2t, m.t2c)
    z = fuse("gated", aggregate_cells(dual.cell), tissue_summary(dual.tissue, m.cls_proj(T.Tensor(grid4.cls))),
             m.fusion)
    pred = classify(z, m.head)
    assert np.array_equal(res.prediction.logits.data, pred.logits.data)
    assert np.array_equal(res.perm, perm)
    assert abs(res.prediction.probs.sum() - 1) < 1e-12


def test_attention_mass_is_distribution(cells8, grid4, tiny_model):
    res = forward_model(tiny_model, cells8, grid4)
    for mass in (res.cell_attention, res.tissue_attention):
        assert mass.shape == (8,) and np.all(mass >= 0) and abs(mass.sum() - 1) < 1e-12
    back = res.attention_in_input_order()
    assert np.array_equal(back[res.perm], res.cell_attention)


@pytest.mark.parametrize("aggregator", ["rwkv", "self_attention", "mean_pool"])
def test_permutation_invariance_every_aggregator(cells8, grid4, aggregator):
    m = Model.init(tiny_config(aggregator=aggregator), seed=1)
    ref = forward_model(m, cells8, grid4).prediction.probs
    rng = np.random.default_rng(0)
    for _ in range(10):
        p = forward_model(m, cells8.permuted(rng.permutation(8)), grid4).prediction.probs
        assert np.array_equal(p, ref)


def test_inference_deterministic(cells8, grid4, tiny_model):
    a = forward_model(tiny_model, cells8, grid4).prediction.logits.data
    b = forward_model(tiny_model, cells8, grid4).prediction.logits.data
    assert np.array_equal(a, b)


def test_aggregator_swap_keeps_other_stages():
    names = {k: set(Model.init(tiny_config(aggregator=k), 0).parameters())
             for k in ("rwkv", "self_attention", "mean_pool")}
    shared = {n for n in names["rwkv"] if not n.startswith("stack.")}
    for k in ("self_attention", "mean_pool"):
        own = {n for n in names[k] if n.startswith(("self_attn.", "pool."))}
        assert names[k] - own == shared


def test_same_seed_same_parameters_across_aggregators():
    a = Model.init(tiny_config(aggregator="rwkv"), 3).parameters()
    b = Model.init(tiny_config(aggregator="mean_pool"), 3).parameters()
    for k in ("enc1.W", "c2t.W_q", "head.W2"):
        assert np.array_equal(a[k].data, b[k].data)


def test_tissue_only_ignores_cell_features(grid4):
    m = Model.init(tiny_config(branches="tissue"), seed=2)
    c1 = make_cells(8, seed=3)
    c2 = type(c1)(c1.features * -5 + 1, c1.centroids, c1.boxes, c1.image_extent)
    a = forward_model(m, c1, grid4).prediction.logits.data
    b = forward_model(m, c2, grid4).prediction.logits.data
    assert np.array_equal(a, b)


def test_cell_only_ignores_tissue_tokens(cells8):
    m = Model.init(tiny_config(branches="cell"), seed=2)
    a = forward_model(m, cells8, make_grid(seed=1)).prediction.logits.data
    b = forward_model(m, cells8, make_grid(seed=2)).prediction.logits.data
    assert np.array_equal(a, b)


@pytest.mark.parametrize("fusion", ["average", "add", "film", "concat"])
def test_fusion_variants_run(cells8, grid4, fusion):
    m = Model.init(tiny_config(fusion=fusion), seed=4)
    loss, res = sample_loss(m, cells8, grid4, 2)
    assert np.isfinite(loss.item()) and res.prediction.probs.shape == (4,)


def test_single_cell_sample(grid4):
    m = Model.init(tiny_config(), seed=0)
    res = forward_model(m, make_cells(1, seed=5), grid4)
    assert res.cell_attention.tolist() == [1.0]
