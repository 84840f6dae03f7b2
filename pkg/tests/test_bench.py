import numpy as np
import pytest

from itcrwkv import bench
from itcrwkv.bench import BENCH_KINDS, BenchError, check_kinds, flops, make_inputs, make_runner, run_bench


def test_flops_hand_counts():
    # n = d = 2: projections 3 * 2*n*d*d = 48, scores and mixing 2 * 2*n*n*d = 32
    assert flops("self_attention", 2, 2) == 80
    # five projections 5 * 2*n*d*d = 80, plus 21 per scanned element * 4 elements
    assert flops("rwkv", 2, 2) == 164
    assert flops("rwkv", 2, 2, depth=3) == 3 * 164
    assert flops("mean_pool", 2, 2) == 4 + 16
    assert flops("wkv_scan", 2, 2) == 84
    assert flops("wkv_bruteforce", 2, 2) == 32


def test_flops_scaling_orders():
    assert flops("wkv_scan", 4096, 64) / flops("wkv_scan", 512, 64) == 8
    assert flops("wkv_bruteforce", 4096, 64) / flops("wkv_bruteforce", 512, 64) == 64


def test_unknown_kind_lists_valid_set():
    with pytest.raises(ValueError) as info:
        check_kinds(["rwkv", "performer"])
    for k in BENCH_KINDS:
        assert k in str(info.value)
    with pytest.raises(ValueError):
        make_runner("performer", 8)


@pytest.mark.parametrize("kw", [dict(reps=29), dict(warmup=4), dict(n_values=[64, 16]), dict(d=10)])
def test_protocol_enforced(kw):
    args = dict(kinds=["mean_pool"], n_values=[16], d=8, heads=4)
    args.update(kw)
    with pytest.raises(ValueError):
        run_bench(**args)


def test_refuses_parallel_pools(monkeypatch):
    monkeypatch.setattr(bench, "threadpool_info",
                        lambda: [{"internal_api": "openblas", "num_threads": 8}])
    with pytest.raises(BenchError, match="openblas=8"):
        run_bench(["mean_pool"], [8], d=8, heads=2)


def test_runners_agree_with_library_calls():
    x = make_inputs(20, 8, seed=1)
    for kind in BENCH_KINDS:
        out = make_runner(kind, 8, heads=2)(x)
        assert np.isfinite(out).all()
    scan = make_runner("wkv_scan", 8)(x)
    brute = make_runner("wkv_bruteforce", 8)(x)
    assert np.allclose(scan, brute, atol=1e-9)


def test_report_fields_and_csv(tmp_path):
    rep = run_bench(["self_attention", "mean_pool"], [16, 512], d=16, heads=2)
    assert len(rep.rows) == 4
    for r in rep.rows:
        assert r.reps == 30 and r.warmup == 5 and r.inner >= 1
        assert r.median_ms > 0 and r.p95_ms >= r.median_ms and r.peak_bytes > 0
        assert r.throughput == pytest.approx(1e3 / r.median_ms)
    assert all(r.speedup == 1.0 for r in rep.rows if r.kind == "self_attention")
    assert rep.row("self_attention", 512).median_ms > rep.row("self_attention", 16).median_ms
    # the n x n score matrix of one head is materialized
    assert rep.row("self_attention", 512).peak_bytes >= 512 * 512 * 8
    path = tmp_path / "b.csv"
    rep.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# ") and "single thread" in lines[0]
    assert lines[1].split(",")[:3] == ["kind", "n", "d"] and len(lines) == 6
    assert "speed-up" in rep.table()
