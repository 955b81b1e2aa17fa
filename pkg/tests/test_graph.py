import io
import json

import numpy as np
import pytest

from convbn.block import Mode
from convbn.checks import fd_gradient, rel_err
from convbn.errors import ModeError, SchemaError
from convbn.fixtures import (
    five_eligible_graph,
    identity_graph,
    mixed_dim_graph,
    seven_pattern_graph,
    toy_net_graph,
)
from convbn.graph import (
    Graph,
    Node,
    dump_params,
    execute_backward,
    execute_forward,
    find_convbn_pairs,
    graph_from_json,
    graph_to_json,
    revert,
    switch_mode,
    turn_on,
)
from convbn.ops import softmax_xent
from convbn.tensor import Rng


def params_bytes(g):
    buf = io.BytesIO()
    dump_params(g, buf)
    return buf.getvalue()


class TestLoadDump:
    def test_identity_graph_executes_as_identity(self):
        g = identity_graph()
        x = Rng(0).normal((2, 3, 4, 4))
        out, saved, _ = execute_forward(g, x)
        assert out is x
        d_in, grads = execute_backward(g, saved, x)
        assert d_in is x and grads == {}

    def test_missing_reference_names_node(self):
        doc = {"nodes": [
            {"id": "in", "op": "input", "inputs": []},
            {"id": "a", "op": "relu", "inputs": ["x9"]},
            {"id": "out", "op": "output", "inputs": ["a"]},
        ]}
        with pytest.raises(SchemaError, match="x9"):
            graph_from_json(doc)

    def test_cycle_detected(self):
        doc = {"nodes": [
            {"id": "in", "op": "input", "inputs": []},
            {"id": "a", "op": "relu", "inputs": ["b"]},
            {"id": "b", "op": "relu", "inputs": ["a"]},
            {"id": "out", "op": "output", "inputs": ["in"]},
        ]}
        with pytest.raises(SchemaError, match="cycle"):
            graph_from_json(doc)

    def test_unknown_op(self):
        doc = {"nodes": [
            {"id": "in", "op": "input", "inputs": []},
            {"id": "m", "op": "maxpool", "inputs": ["in"]},
            {"id": "out", "op": "output", "inputs": ["m"]},
        ]}
        with pytest.raises(SchemaError, match="maxpool"):
            graph_from_json(doc)

    def test_seven_node_chain_roundtrip_stable(self):
        g = toy_net_graph(seed=1)
        doc1 = graph_to_json(g)
        g2 = graph_from_json(json.loads(json.dumps(doc1)), params=g.params)
        doc2 = graph_to_json(g2)
        assert json.dumps(doc1, sort_keys=True) == json.dumps(doc2, sort_keys=True)

    def test_params_file_roundtrip(self, tmp_path):
        from convbn.graph import dump_graph, load_graph
        g = toy_net_graph(seed=2)
        g._params_file = "toy.cbnt"
        dump_params(g, tmp_path / "toy.cbnt")
        dump_graph(g, tmp_path / "toy.json")
        back = load_graph(tmp_path / "toy.json")
        assert set(back.params) == set(g.params)
        x = Rng(1).normal((1, 3, 8, 8))
        a, _, _ = execute_forward(g, x)
        b, _, _ = execute_forward(back, x)
        assert np.array_equal(a, b)


class TestMatcher:
    def test_simple_chain(self):
        g = five_eligible_graph()
        pairs, skipped = find_convbn_pairs(g)
        assert len(pairs) == 5 and skipped == []

    def test_seven_pattern_census(self):
        g = seven_pattern_graph()
        pairs, skipped = find_convbn_pairs(g)
        assert [p for p in pairs] == [("c1", "b1"), ("c2", "b2"), ("c3", "b3"),
                                      ("c5", "b5"), ("c6", "b6")]
        assert ("c4", "multi_consumer") in skipped
        assert ("c7", "no_bn_follower") in skipped
        assert len(skipped) == 2

    def test_mixed_dims_reported_unsupported(self):
        g = mixed_dim_graph()
        pairs, skipped = find_convbn_pairs(g)
        assert pairs == [("k2", "n2")]
        assert ("k1", "unsupported_dim") in skipped
        assert ("k3", "unsupported_dim") in skipped


class TestTurnOn:
    @pytest.mark.parametrize("mode", ["tune", "deploy"])
    def test_rewrite_soundness(self, mode):
        g = seven_pattern_graph(seed=4)
        x = Rng(5).normal((2, 3, 16, 16))
        before, _, _ = execute_forward(g, x)
        report = turn_on(g, mode)
        assert len(report.rewritten) == 5
        after, _, _ = execute_forward(g, x)
        assert np.max(np.abs(after - before)) <= 1e-10

    def test_no_pairs_graph_untouched(self):
        g = identity_graph()
        doc_before = json.dumps(graph_to_json(g), sort_keys=True)
        report = turn_on(g, Mode.TUNE)
        assert report.rewritten == [] and report.skipped == []
        assert json.dumps(graph_to_json(g), sort_keys=True) == doc_before

    def test_deploy_leaves_no_bn2d_on_clean_fixture(self):
        g = five_eligible_graph(seed=6)
        report = turn_on(g, Mode.DEPLOY)
        assert len(report.rewritten) == 5
        assert all(n.op != "bn2d" for n in g.nodes.values())

    def test_train_mode_rejected(self):
        g = five_eligible_graph()
        with pytest.raises(ModeError):
            turn_on(g, Mode.TRAIN)

    def test_tune_buffers_registered(self):
        g = five_eligible_graph(seed=7)
        turn_on(g, Mode.TUNE)
        var = g.params["b1.running_var"]
        expect = (1.0 / np.sqrt(var + 1e-5)).reshape(-1, 1, 1, 1)
        assert np.array_equal(g.params["c1.weight_coeff"], expect)
        assert np.array_equal(g.params["c1.bias_delta"], -g.params["b1.running_mean"])

    def test_deploy_consumes_affine_from_trainables(self):
        g = five_eligible_graph(seed=8)
        assert "b1.gamma" in g.trainable_names()
        turn_on(g, Mode.DEPLOY)
        names = g.trainable_names()
        assert "b1.gamma" not in names and "b1.beta" not in names
        assert "c1.weight" in names and "c1.bias" in names
        # tune keeps them trainable
        g2 = five_eligible_graph(seed=8)
        turn_on(g2, Mode.TUNE)
        assert "b1.gamma" in g2.trainable_names()


class TestRevertAndSwitch:
    @pytest.mark.parametrize("mode", ["tune", "deploy"])
    def test_revert_restores_parameter_store_bitwise(self, mode):
        g = seven_pattern_graph(seed=9)
        before = params_bytes(g)
        doc_before = json.dumps(graph_to_json(g), sort_keys=True)
        turn_on(g, mode)
        assert params_bytes(g) != before or mode == "tune"
        revert(g)
        assert params_bytes(g) == before
        assert json.dumps(graph_to_json(g), sort_keys=True) == doc_before

    def test_revert_untouched_graph_is_noop(self):
        g = five_eligible_graph()
        report = revert(g)
        assert report.rewritten == []

    def test_switch_tune_to_deploy_preserves_forward(self):
        g = five_eligible_graph(seed=10)
        x = Rng(11).normal((2, 3, 12, 12))
        turn_on(g, Mode.TUNE)
        before, _, _ = execute_forward(g, x)
        switch_mode(g, Mode.DEPLOY)
        after, _, _ = execute_forward(g, x)
        assert np.max(np.abs(after - before)) <= 1e-10
        assert all(r["mode"] == "deploy" for r in g.reserved_bns)

    def test_switch_back_to_train_sets_bn_attrs(self):
        g = five_eligible_graph(seed=12)
        turn_on(g, Mode.DEPLOY)
        switch_mode(g, Mode.TRAIN)
        bn_nodes = [n for n in g.nodes.values() if n.op == "bn2d"]
        assert len(bn_nodes) == 5
        assert all(n.attrs["mode"] == "train" for n in bn_nodes)

    def test_tune_revert_keeps_training_progress(self):
        # Tune never consumes parameters: updates made while rewritten survive
        g = five_eligible_graph(seed=13)
        turn_on(g, Mode.TUNE)
        g.params["c1.weight"] = g.params["c1.weight"] + 1.0
        trained = g.params["c1.weight"].copy()
        revert(g)
        assert np.array_equal(g.params["c1.weight"], trained)


class TestExecutor:
    def test_graph_gradcheck(self):
        g = toy_net_graph(seed=14, width=4, in_channels=2)
        rng = Rng(15)
        x = rng.normal((2, 2, 6, 6))
        labels = np.array([1, 3])

        def loss_for(params_override=None, x_in=None):
            gc = g.copy()
            if params_override:
                gc.params.update(params_override)
            logits, _, _ = execute_forward(gc, x_in if x_in is not None else x)
            return softmax_xent(logits, labels)[0]

        logits, saved, _ = execute_forward(g, x)
        loss, dlogits = softmax_xent(logits, labels)
        d_in, grads = execute_backward(g, saved, dlogits)
        for name in g.trainable_names():
            fd = fd_gradient(lambda t, n=name: loss_for({n: t}), g.params[name])
            assert rel_err(grads[name], fd) <= 1e-5, name
        fd_x = fd_gradient(lambda t: loss_for(x_in=t), x)
        assert rel_err(d_in, fd_x) <= 1e-5

    def test_eval_tune_whole_graph_loss_equal(self):
        g = toy_net_graph(seed=16)
        x = Rng(17).normal((2, 3, 10, 10))
        labels = np.array([0, 2])
        logits_e, saved_e, _ = execute_forward(g, x)
        loss_e, dl = softmax_xent(logits_e, labels)
        _, grads_e = execute_backward(g, saved_e, dl)
        gt = g.copy()
        turn_on(gt, Mode.TUNE)
        logits_t, saved_t, _ = execute_forward(gt, x)
        loss_t, dl_t = softmax_xent(logits_t, labels)
        _, grads_t = execute_backward(gt, saved_t, dl_t)
        assert abs(loss_e - loss_t) <= 1e-10
        for name in grads_e:
            assert rel_err(grads_t[name], grads_e[name]) <= 1e-9, name

    def test_executor_bitwise_deterministic(self):
        g = seven_pattern_graph(seed=18)
        x = Rng(19).normal((2, 3, 16, 16))
        a, saved_a, _ = execute_forward(g, x)
        b, saved_b, _ = execute_forward(g, x)
        assert a.tobytes() == b.tobytes()
        da, ga = execute_backward(g, saved_a, np.ones_like(a))
        db_, gb = execute_backward(g, saved_b, np.ones_like(b))
        assert da.tobytes() == db_.tobytes()
        assert all(ga[k].tobytes() == gb[k].tobytes() for k in ga)

    def test_train_mode_stat_updates_returned_not_applied(self):
        g = toy_net_graph(seed=20, bn_mode="train")
        x = Rng(21).normal((2, 3, 8, 8))
        before = g.params["b1.running_mean"].copy()
        _, _, updates = execute_forward(g, x)
        assert "b1.running_mean" in updates and "b2.running_var" in updates
        assert np.array_equal(g.params["b1.running_mean"], before)
        assert not np.array_equal(updates["b1.running_mean"], before)

    def test_add_node_fans_gradient_to_both_inputs(self):
        params = {"c.weight": Rng(22).normal((2, 2, 1, 1))}
        g = Graph([
            Node("in", "input", []),
            Node("c", "conv2d", ["in"], "c", {"stride": [1, 1], "padding": [0, 0]}),
            Node("a", "add", ["c", "in"]),
            Node("out", "output", ["a"]),
        ], params)
        x = Rng(23).normal((1, 2, 4, 4))
        out, saved, _ = execute_forward(g, x)
        dz = Rng(24).normal(out.shape)
        d_in, grads = execute_backward(g, saved, dz)
        fd = fd_gradient(
            lambda t: float(np.sum(execute_forward(g, t)[0] * dz)), x)
        assert rel_err(d_in, fd) <= 1e-5

    def test_shape_error_names_node(self):
        g = toy_net_graph(seed=25)
        with pytest.raises(Exception, match="c1"):
            execute_forward(g, Rng(26).normal((1, 5, 8, 8)))

    def test_unsupported_dim_not_executable(self):
        g = mixed_dim_graph()
        with pytest.raises(ModeError, match="k1"):
            execute_forward(g, np.ones((1, 3, 8)))
