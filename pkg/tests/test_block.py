import numpy as np
import pytest

from convbn.block import (
    ConvBNBlock,
    Mode,
    backward,
    block_from_tensors,
    block_to_tensors,
    forward,
    fuse_params,
    revert,
    scaling_coefficients,
    to_deploy,
)
from convbn.errors import ModeError, ShapeError
from convbn.fixtures import random_block
from convbn.ops import BNParams, ConvParams
from convbn.tensor import Rng

EPS = 1e-5
GRAD_KEYS = ("x", "weight", "bias", "gamma", "beta")


def rel(a, b):
    return np.max(np.abs(a - b)) / max(1e-30, np.max(np.abs(b)))


class TestFuseParams:
    def test_scalar_example(self):
        w = np.full((1, 1, 1, 1), 2.0)
        wf, bf = fuse_params(w, np.array([1.0]), np.array([3.0]), np.array([1.0]),
                             np.array([1.0]), np.array([4.0 - EPS]), EPS)
        assert np.allclose(wf, 3.0, rtol=0, atol=1e-12)   # 2 * 3/sqrt(4)
        assert np.allclose(bf, 1.0, rtol=0, atol=1e-12)   # (1-1)*1.5 + 1

    def test_identity_transform(self):
        rng = Rng(1)
        w = rng.normal((3, 2, 3, 3))
        b = rng.normal((3,))
        wf, bf = fuse_params(w, b, np.ones(3), np.zeros(3), np.zeros(3),
                             np.ones(3) - EPS, EPS)
        assert np.allclose(wf, w, rtol=0, atol=1e-12)
        assert np.allclose(bf, b, rtol=0, atol=1e-12)

    def test_zero_gamma(self):
        rng = Rng(2)
        w = rng.normal((2, 1, 3, 3))
        beta = rng.normal((2,))
        wf, bf = fuse_params(w, None, np.zeros(2), beta, rng.normal((2,)),
                             rng.uniform((2,), 0.5, 1.5), EPS)
        assert not wf.any()
        assert np.array_equal(bf, beta)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            fuse_params(np.ones((2, 1, 1, 1)), None, np.ones(3), np.ones(3),
                        np.zeros(3), np.ones(3), EPS)


class TestForwardEquivalence:
    def test_eval_tune_deploy_agree_on_random_states(self):
        worst_tune = worst_dep = 0.0
        for seed in range(30):
            block, x, _ = random_block(Rng(seed))
            z_eval, _, _ = forward(block, x, mode=Mode.EVAL)
            z_tune, _, _ = forward(block, x, mode=Mode.TUNE)
            z_dep, _, _ = forward(to_deploy(block), x)
            worst_tune = max(worst_tune, float(np.max(np.abs(z_eval - z_tune))))
            worst_dep = max(worst_dep, float(np.max(np.abs(z_eval - z_dep))))
        assert worst_tune <= 1e-11
        assert worst_dep <= 1e-11

    def test_identity_normalization_all_modes_equal_conv(self):
        rng = Rng(3)
        conv = ConvParams(rng.normal((3, 2, 3, 3)), rng.normal((3,)), (1, 1), (1, 1))
        bn = BNParams(np.ones(3), np.zeros(3), np.zeros(3), np.ones(3) - EPS, eps=EPS)
        block = ConvBNBlock(conv=conv, bn=bn)
        x = rng.normal((2, 2, 6, 6))
        from convbn.ops import conv2d_forward
        y = conv2d_forward(x, conv)
        for mode in (Mode.EVAL, Mode.TUNE):
            z, _, _ = forward(block, x, mode=mode)
            assert np.allclose(z, y, rtol=0, atol=1e-12)
        z, _, _ = forward(to_deploy(block), x)
        assert np.allclose(z, y, rtol=0, atol=1e-12)

    def test_saved_sets_match_table(self):
        block, x, _ = random_block(Rng(4))
        _, saved, _ = forward(block, x, mode=Mode.EVAL)
        assert saved.names() == ["X", "Y"]
        _, saved, _ = forward(block, x, mode=Mode.TUNE)
        assert saved.names() == ["X", "w_fused", "b_fused"]
        _, saved, _ = forward(to_deploy(block), x)
        assert saved.names() == ["X"]
        block.mode = Mode.TRAIN
        _, saved, upd = forward(block, x)
        assert saved.names() == ["X", "xhat", "mean", "var"]
        assert upd is not None

    def test_train_forward_on_deploy_block_is_mode_error(self):
        block, x, _ = random_block(Rng(5))
        dep = to_deploy(block)
        with pytest.raises(ModeError):
            forward(dep, x, mode=Mode.TRAIN)

    def test_tune_forward_keeps_stats_bit_identical(self):
        block, x, dz = random_block(Rng(6), mode=Mode.TUNE)
        mean0 = block.bn.running_mean.copy()
        var0 = block.bn.running_var.copy()
        for _ in range(3):
            _, saved, upd = forward(block, x)
            assert upd is None
            backward(block, saved, dz)
        assert block.bn.running_mean.tobytes() == mean0.tobytes()
        assert block.bn.running_var.tobytes() == var0.tobytes()

    def test_tune_buffers_invariant(self):
        block, _, _ = random_block(Rng(7), mode=Mode.TUNE)
        expect_coeff = (1.0 / np.sqrt(block.bn.running_var + EPS)).reshape(-1, 1, 1, 1)
        assert np.array_equal(block.weight_coeff, expect_coeff)
        assert np.array_equal(block.bias_delta, -block.bn.running_mean)


class TestBackward:
    def test_eval_tune_gradients_match(self):
        for seed in range(30):
            block, x, dz = random_block(Rng(seed + 100))
            _, s_eval, _ = forward(block, x, mode=Mode.EVAL)
            _, s_tune, _ = forward(block, x, mode=Mode.TUNE)
            block.mode = Mode.EVAL
            g_eval = backward(block, s_eval, dz)
            block.mode = Mode.TUNE
            g_tune = backward(block, s_tune, dz)
            for key in GRAD_KEYS:
                assert rel(g_tune[key], g_eval[key]) <= 1e-10, key

    def test_zero_upstream_gives_zero_gradients_every_mode(self):
        block, x, dz = random_block(Rng(8))
        zero = np.zeros_like(dz)
        for mode in (Mode.EVAL, Mode.TUNE, Mode.TRAIN):
            block.mode = mode
            _, saved, _ = forward(block, x)
            grads = backward(block, saved, zero)
            assert all(not g.any() for g in grads.values())
        dep = to_deploy(block)
        _, saved, _ = forward(dep, x)
        grads = backward(dep, saved, zero)
        assert all(not g.any() for g in grads.values())

    def test_deploy_gradient_inverse_scaling(self):
        for seed in range(20):
            block, x, dz = random_block(Rng(seed + 200))
            _, s_eval, _ = forward(block, x, mode=Mode.EVAL)
            block.mode = Mode.EVAL
            g_eval = backward(block, s_eval, dz)
            dep = to_deploy(block)
            _, s_dep, _ = forward(dep, x)
            g_dep = backward(dep, s_dep, dz)
            c = scaling_coefficients(block)
            assert rel(g_dep["weight"] * c.reshape(-1, 1, 1, 1), g_eval["weight"]) <= 1e-10
            assert rel(g_dep["bias"] * c, g_eval["bias"]) <= 1e-10

    def test_saved_mode_mismatch(self):
        block, x, dz = random_block(Rng(9))
        _, saved, _ = forward(block, x, mode=Mode.EVAL)
        block.mode = Mode.TUNE
        with pytest.raises(ModeError):
            backward(block, saved, dz)

    def test_one_step_sgd_consistency(self):
        # effective fused-weight change: Eval-parametrized step scales the
        # Deploy step by c^2 per channel (c = 0.1 -> ratio 0.01)
        lr = 0.05
        block, x, dz = random_block(Rng(10), with_bias=True)
        c = scaling_coefficients(block)
        _, s_eval, _ = forward(block, x, mode=Mode.EVAL)
        block.mode = Mode.EVAL
        g_eval = backward(block, s_eval, dz)
        dep = to_deploy(block)
        _, s_dep, _ = forward(dep, x)
        g_dep = backward(dep, s_dep, dz)
        w_new = block.conv.weight - lr * g_eval["weight"]
        delta_eval = w_new * c.reshape(-1, 1, 1, 1) - dep.conv.weight
        delta_dep = -lr * g_dep["weight"]
        assert np.allclose(delta_eval, delta_dep * (c ** 2).reshape(-1, 1, 1, 1),
                           rtol=1e-8, atol=1e-14)


class TestScalingCoefficients:
    def test_example(self):
        bn = BNParams(np.array([1.0, 2.0]), np.zeros(2), np.zeros(2),
                      np.array([0.25 - EPS, 0.25 - EPS]), eps=EPS)
        block = ConvBNBlock(conv=ConvParams(np.ones((2, 1, 1, 1))), bn=bn)
        assert np.allclose(scaling_coefficients(block), [2.0, 4.0], rtol=0, atol=1e-12)

    def test_identity_and_zero(self):
        bn = BNParams(np.ones(3), np.zeros(3), np.zeros(3), np.ones(3) - EPS, eps=EPS)
        block = ConvBNBlock(conv=ConvParams(np.ones((3, 1, 1, 1))), bn=bn)
        assert np.allclose(scaling_coefficients(block), 1.0, rtol=0, atol=1e-12)
        bn2 = BNParams(np.zeros(3), np.zeros(3), np.zeros(3), np.ones(3), eps=EPS)
        block2 = ConvBNBlock(conv=ConvParams(np.ones((3, 1, 1, 1))), bn=bn2)
        assert not scaling_coefficients(block2).any()

    def test_deploy_block_rejected(self):
        block, _, _ = random_block(Rng(11))
        with pytest.raises(ModeError):
            scaling_coefficients(to_deploy(block))


class TestDeployRevert:
    def test_revert_restores_bitwise(self):
        block, _, _ = random_block(Rng(12), with_bias=True)
        w0, b0 = block.conv.weight.copy(), block.conv.bias.copy()
        dep = to_deploy(block)
        back = revert(dep)
        assert back.conv.weight.tobytes() == w0.tobytes()
        assert back.conv.bias.tobytes() == b0.tobytes()
        assert back.bn is block.bn

    def test_revert_non_deploy_is_noop(self):
        block, _, _ = random_block(Rng(13))
        assert revert(block) is block


def test_serialization_reserved_names(tmp_path):
    import convbn.container as container

    block, _, _ = random_block(Rng(14), with_bias=True)
    tensors = block_to_tensors(block)
    assert set(tensors) == {"conv.weight", "conv.bias", "bn.gamma", "bn.beta",
                            "bn.running_mean", "bn.running_var"}
    path = tmp_path / "block.cbnt"
    container.write_tensors(tensors, path)
    back = block_from_tensors(container.read_tensors(path),
                              stride=block.conv.stride, padding=block.conv.padding)
    assert back.conv.weight.tobytes() == block.conv.weight.tobytes()
    assert back.bn.gamma.tobytes() == block.bn.gamma.tobytes()
