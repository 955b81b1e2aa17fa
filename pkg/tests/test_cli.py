import json

import numpy as np
import pytest

from convbn.cli import main
from convbn.container import read_tensors, write_tensors
from convbn.fixtures import seven_pattern_graph
from convbn.graph import dump_graph, dump_params, load_graph


def run_cli(*argv):
    return main(list(argv))


def test_verify_passes_and_reports_deterministically(tmp_path, capsys):
    out1 = tmp_path / "a.json"
    out2 = tmp_path / "b.json"
    assert run_cli("verify", "--instances", "6", "--seed", "42", "--out", str(out1)) == 0
    assert run_cli("verify", "--instances", "6", "--seed", "42", "--out", str(out2)) == 0
    assert out1.read_bytes() == out2.read_bytes()
    doc = json.loads(out1.read_text())
    assert doc["passed"] and doc["experiment"] == "verify"


def test_verify_fault_injection_fails(tmp_path):
    out = tmp_path / "f.json"
    code = run_cli("verify", "--instances", "6", "--seed", "0",
                   "--inject-fault", "--out", str(out))
    assert code == 1
    doc = json.loads(out.read_text())
    suite = next(s for s in doc["checks"] if s["name"] == "eval_tune_forward")
    assert suite["failing_seeds"] and "injected_fault" in suite


def test_gradcheck_command(tmp_path):
    out = tmp_path / "g.json"
    assert run_cli("gradcheck", "--instances", "2", "--out", str(out)) == 0
    doc = json.loads(out.read_text())
    assert doc["passed"]


def test_stability_command(tmp_path):
    out = tmp_path / "s.json"
    assert run_cli("stability", "--coeffs", "0.1,1,10", "--steps", "10",
                   "--out", str(out)) == 0
    doc = json.loads(out.read_text())
    assert np.allclose(doc["one_step"]["measured_ratio"], [0.01, 1.0, 100.0], rtol=0.01)


def test_coeffs_command(tmp_path):
    stats = tmp_path / "stats.cbnt"
    write_tensors({
        "layer1.gamma": np.array([1.0, 2.0]),
        "layer1.running_var": np.array([0.25 - 1e-5, 0.25 - 1e-5]),
    }, stats)
    out = tmp_path / "c.json"
    assert run_cli("coeffs", str(stats), "--bins", "4", "--out", str(out)) == 0
    doc = json.loads(out.read_text())
    assert doc["pooled"]["min"] == pytest.approx(2.0)
    assert doc["pooled"]["max"] == pytest.approx(4.0)


def test_coeffs_missing_names_is_error(tmp_path, capsys):
    stats = tmp_path / "bad.cbnt"
    write_tensors({"layer1.gamma": np.ones(2)}, stats)
    assert run_cli("coeffs", str(stats)) == 2
    assert "running_var" in capsys.readouterr().err


def test_train_command_with_phases(tmp_path):
    out = tmp_path / "t.json"
    params = tmp_path / "final.cbnt"
    code = run_cli("train", "--steps", "4", "--phases", "train:3;tune:3",
                   "--lr", "0.01", "--out", str(out), "--save-params", str(params))
    assert code == 0
    doc = json.loads(out.read_text())
    assert doc["modes"] == ["train"] * 3 + ["tune"] * 3
    assert len(read_tensors(params)) > 0


def test_train_on_packed_dataset(tmp_path):
    from convbn.fixtures import make_blob_dataset
    images, labels = make_blob_dataset(1, 32, 3, 16, 4, "f32")
    packed = tmp_path / "data.cbnt"
    write_tensors({"images": images, "labels": labels.astype(np.float64)}, packed)
    out = tmp_path / "t.json"
    assert run_cli("train", "--steps", "3", "--dataset", str(packed),
                   "--out", str(out)) == 0


def test_rewrite_command_roundtrip(tmp_path):
    g = seven_pattern_graph(seed=1)
    graph_path = tmp_path / "g.json"
    params_path = tmp_path / "p.cbnt"
    g._params_file = "p.cbnt"
    dump_graph(g, graph_path)
    dump_params(g, params_path)

    out_graph = tmp_path / "g_tune.json"
    out_params = tmp_path / "p_tune.cbnt"
    report_path = tmp_path / "report.json"
    code = run_cli("rewrite", "--graph", str(graph_path), "--mode", "tune",
                   "--out-graph", str(out_graph), "--out-params", str(out_params),
                   "--out", str(report_path),
                   "--footprint-shape", "2x3x16x16", "--dtype", "f32")
    assert code == 0
    doc = json.loads(report_path.read_text())
    assert len(doc["report"]["rewritten"]) == 5
    assert {s["reason"] for s in doc["report"]["skipped"]} == {
        "multi_consumer", "no_bn_follower"}
    assert doc["footprint"]["total_elements"] > 0

    rewritten = load_graph(out_graph, params=read_tensors(out_params))
    assert all(r["mode"] == "tune" for r in rewritten.reserved_bns)
    x = np.asarray(np.random.RandomState(0).randn(2, 3, 16, 16))
    from convbn.graph import execute_forward
    a, _, _ = execute_forward(g, x)
    b, _, _ = execute_forward(rewritten, x)
    assert np.max(np.abs(a - b)) <= 1e-10


def test_rewrite_train_mode_rejected(tmp_path, capsys):
    g = seven_pattern_graph(seed=2)
    graph_path = tmp_path / "g.json"
    g._params_file = "p.cbnt"
    dump_graph(g, graph_path)
    dump_params(g, tmp_path / "p.cbnt")
    assert run_cli("rewrite", "--graph", str(graph_path), "--mode", "train") == 2
    assert "Tune and Deploy" in capsys.readouterr().err


def test_bench_smoke(tmp_path):
    out = tmp_path / "b.json"
    csv = tmp_path / "b.csv"
    code = run_cli("bench", "--grid", "4x8", "--reps", "1", "--out", str(out),
                   "--csv", str(csv))
    assert code == 0
    doc = json.loads(out.read_text())
    assert len(doc["cells"]) == 1
    cell = doc["cells"][0]
    assert cell["memory"]["deploy"]["elements"] <= cell["memory"]["tune"]["elements"]
    assert cell["memory"]["tune"]["elements"] <= cell["memory"]["eval"]["elements"]
    assert csv.read_text().startswith("batch,size")
