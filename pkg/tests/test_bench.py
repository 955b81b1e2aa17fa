import numpy as np
import pytest

from convbn import kernels
from convbn.bench import bench_backends, bench_csv, bench_modes, bench_table
from convbn.memory import count_saved
from convbn.fixtures import bench_graph


def test_trivial_single_layer_modes_within_2x():
    # overhead-dominated case: one thin layer, all modes comparable
    out = bench_modes(grid=[(4, 16)], seed=1, reps=7, warmup=2, layers=1)
    t = out["cells"][0]["time_s"]
    assert max(t.values()) <= 2.0 * min(t.values())


def test_memory_columns_reproduce_count_saved():
    out = bench_modes(grid=[(4, 16)], seed=2, reps=1, warmup=0, layers=4)
    cell = out["cells"][0]
    g = bench_graph(seed=2, dtype="f32", layers=4)
    for mode in ("eval", "tune", "deploy"):
        rep = count_saved(g, mode, (4, 3, 16, 16), "f32")
        assert cell["memory"][mode]["elements"] == rep.totals_by_mode[mode]
        assert cell["memory"][mode]["bytes"] == rep.totals_by_mode[mode] * 4


def test_report_formats():
    out = bench_modes(grid=[(4, 16)], seed=3, reps=1, warmup=0, layers=2)
    table = bench_table(out)
    assert "batch" in table and "16" in table
    csv = bench_csv(out)
    assert csv.splitlines()[0].startswith("batch,size")
    assert len(csv.splitlines()) == 2


@pytest.mark.skipif("cython" not in kernels.available_backends(),
                    reason="compiled extension not built")
def test_backend_comparison_restores_active_backend():
    before = kernels.backend_name()
    out = bench_backends(grid=[(4, 16)], seed=4, reps=1, warmup=0)
    assert kernels.backend_name() == before
    row = out["cells"][0]
    assert set(row["time_s"]) == {"cython", "numpy"}
    assert row["numpy_over_cython"] > 0
