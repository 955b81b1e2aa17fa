import numpy as np
import pytest

from convbn import checks
from convbn.block import Mode


def test_verify_all_passes():
    report = checks.verify_all(instances=15, seed=0)
    assert report["passed"]
    names = {s["name"] for s in report["checks"]}
    assert names == {
        "eval_tune_forward", "eval_tune_backward", "deploy_forward",
        "deploy_gradient_scaling", "conv_affine_associativity", "broadcast_adjoint",
    }
    for suite in report["checks"]:
        assert suite["max_value"] <= suite["tolerance"]
        assert suite["failing_seeds"] == []


def test_fault_injection_fails_and_names_instance():
    report = checks.eval_tune_forward_suite(10, seed=1000, inject_fault_at=3)
    assert not report["passed"]
    assert report["failing_seeds"] == [1003]
    assert "1003" in report["injected_fault"]


def test_gradcheck_small_run():
    report = checks.gradcheck_all(instances=2, seed=123)
    assert report["passed"]
    names = {s["name"] for s in report["checks"]}
    for mode in ("eval", "tune", "deploy", "train"):
        assert f"gradcheck_block_{mode}" in names


def test_one_step_ratio_examples():
    out = checks.one_step_update_ratio([0.1, 1.0, 10.0])
    assert np.allclose(out["expected_ratio"], [0.01, 1.0, 100.0], rtol=1e-12)
    assert out["max_rel_err"] <= 1e-8
    measured = np.asarray(out["measured_ratio"])
    assert np.allclose(measured, [0.01, 1.0, 100.0], rtol=0.01)


def test_one_step_rejects_zero_coefficient():
    with pytest.raises(ValueError, match="0"):
        checks.one_step_update_ratio([0.0, 1.0])


def test_multistep_identity_coefficients_track():
    out = checks.stability_multistep(np.ones(5), steps=50)
    assert out["max_loss_gap"] <= 1e-9


def test_multistep_dispersed_coefficients_report():
    coeffs = [0.1, 1.0, 10.0, 0.5]
    out = checks.stability_multistep(coeffs, steps=10)
    assert len(out["losses_eval"]) == 10
    assert set(out["grad_norm_per_channel"]) == {"eval", "deploy"}
    # per live channel, the Deploy relative update is 1/c^2 times Eval's:
    # channels with small c take outsize steps relative to their weights
    rel_e = np.asarray(out["relative_update_per_channel"]["eval"])
    rel_d = np.asarray(out["relative_update_per_channel"]["deploy"])
    live = rel_e > 0
    assert live.any()
    ratio = rel_d[live] / rel_e[live]
    assert np.allclose(ratio, 1.0 / np.asarray(coeffs)[live] ** 2, rtol=1e-6)


def test_coefficient_histogram_examples():
    t = {
        "l1.gamma": np.array([1.0, 2.0]),
        "l1.running_var": np.array([0.25 - 1e-5, 0.25 - 1e-5]),
    }
    out = checks.coefficient_histogram(t, bins=8)
    assert out["pooled"]["min"] == pytest.approx(2.0, abs=1e-9)
    assert out["pooled"]["max"] == pytest.approx(4.0, abs=1e-9)

    ident = {
        "a.gamma": np.ones(4), "a.running_var": np.ones(4) - 1e-5,
        "b.gamma": np.ones(3), "b.running_var": np.ones(3) - 1e-5,
    }
    out = checks.coefficient_histogram(ident, bins=4)
    assert out["pooled"]["min"] == pytest.approx(1.0)
    assert out["pooled"]["max"] == pytest.approx(1.0)
    assert set(out["layers"]) == {"a", "b"}


def test_coefficient_histogram_missing_names():
    from convbn.errors import InputError
    with pytest.raises(InputError, match="running_var"):
        checks.coefficient_histogram({"l1.gamma": np.ones(2)})
    with pytest.raises(InputError, match="gamma"):
        checks.coefficient_histogram({"x.running_var": np.ones(2)})


def test_per_layer_eps_override():
    t = {
        "l.gamma": np.array([1.0]),
        "l.running_var": np.array([0.0]),
        "l.eps": np.float64(0.04).reshape(()),
    }
    out = checks.coefficient_histogram(t)
    assert out["pooled"]["max"] == pytest.approx(5.0)  # 1/sqrt(0.04)


def test_gradcheck_block_modes_individually():
    for mode in (Mode.EVAL, Mode.TUNE, Mode.DEPLOY, Mode.TRAIN):
        err = checks.gradcheck_block_mode(777, mode)
        assert err <= 1e-5, mode


def test_zero_input_gradients_exactly_zero_both_sides():
    # with X = 0 the conv output is independent of the weight, so both the
    # analytic weight gradient and its finite difference vanish exactly
    from convbn.block import Mode as M, backward, forward
    from convbn.fixtures import random_block
    from convbn.ops import ConvParams, conv2d_forward
    from convbn.tensor import Rng

    rng = Rng(31)
    block, x, dz = random_block(rng, with_bias=True, max_channels=3, max_hw=6)
    x = np.zeros_like(x)
    _, saved, _ = forward(block, x, mode=M.EVAL)
    grads = backward(block, saved, dz)
    assert not grads["weight"].any()
    p = block.conv
    fd = checks.fd_gradient(
        lambda t: float(np.sum(conv2d_forward(
            x, ConvParams(t, p.bias, p.stride, p.padding)) * dz)),
        p.weight)
    assert not fd.any()
