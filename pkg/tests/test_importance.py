import numpy as np
import pytest

from packptq.errors import ConfigError, NumericalError
from packptq.importance import (PerturbationConfig, block_output_gradient, block_quant_loss,
                                estimate_block_score, fd_hessian_mean, hessian_mean_oracle,
                                score_all_blocks, score_from_loss_rows)
from packptq.nets import forward_capture
from packptq.tensor import Tensor, finite_diff_gradient

from conftest import assert_grad_close

A = np.array([[2.0, 1.0], [1.0, 2.0]])
C = np.array([0.5, -1.5])


def quad_rows(Z):
    return 0.5 * np.einsum("bi,ij,bj->b", Z, A, Z) + Z @ C


# -- estimator on synthetic losses --------------------------------------------

def test_quadratic_estimator_converges_to_mean_diagonal():
    z0 = np.array([0.3, -0.7])
    grad0 = A @ z0 + C
    stats = score_from_loss_rows(quad_rows, z0, grad0, float(quad_rows(z0[None])[0]),
                                 sigma=0.01, num_samples=20000,
                                 rng=np.random.default_rng(42))
    assert abs(stats["score"] - 2.0) < 0.05  # tr(A)/n = 2


def test_linear_loss_gives_zero_numerator_and_score():
    z0 = np.array([1.0, 2.0, 3.0])
    c = np.array([0.5, -1.0, 2.0])
    stats = score_from_loss_rows(lambda Z: Z @ c, z0, c, float(z0 @ c),
                                 sigma=0.01, num_samples=5000,
                                 rng=np.random.default_rng(0))
    assert abs(stats["numerator"]) < 1e-10
    assert abs(stats["score"]) < 1e-6


def test_identity_hessian_scores_one_for_any_dimension():
    for n in (2, 7, 33):
        z0 = np.zeros(n)
        stats = score_from_loss_rows(lambda Z: 0.5 * (Z * Z).sum(axis=1), z0, np.zeros(n),
                                     0.0, sigma=0.01, num_samples=4000,
                                     rng=np.random.default_rng(n))
        assert stats["score"] == pytest.approx(1.0, abs=5e-2)


def test_quadratic_numerator_is_exact_per_sample():
    # on a pure quadratic the linear term cancels exactly, so numerator/2
    # equals the quadratic form up to float rounding
    z0 = np.array([0.1, 0.2])
    grad0 = A @ z0 + C
    from packptq.importance import estimate_hessian_mean

    rng = np.random.default_rng(1)
    nums, dens = estimate_hessian_mean(quad_rows, z0, grad0, float(quad_rows(z0[None])[0]),
                                       sigma=0.01, num_samples=200, rng=rng)
    # reproduce the draws to compare elementwise
    rng = np.random.default_rng(1)
    dz = 0.01 * rng.standard_normal((200, 2))
    quad_form = np.einsum("bi,ij,bj->b", dz, A, dz)
    assert np.allclose(nums, quad_form, rtol=1e-6, atol=1e-12)


# -- finite-difference oracle ---------------------------------------------------

def test_oracle_exact_on_quadratics():
    z0 = np.array([0.3, -0.7])
    assert fd_hessian_mean(quad_rows, z0, h=1e-3) == pytest.approx(2.0, abs=1e-6)
    assert fd_hessian_mean(lambda Z: Z @ C, z0, h=1e-3) == pytest.approx(0.0, abs=1e-8)
    assert fd_hessian_mean(lambda Z: 0.5 * (Z * Z).sum(axis=1), z0, h=1e-3) == pytest.approx(1.0, abs=1e-8)


def test_oracle_dimension_guard():
    with pytest.raises(ConfigError, match="512"):
        fd_hessian_mean(lambda Z: (Z * Z).sum(axis=1), np.zeros(600))


# -- network-level operations --------------------------------------------------

def test_zero_perturbation_gives_zero_loss_delta(rings_net, rings_data):
    calib, _ = rings_data
    cap = forward_capture(rings_net, calib.inputs[:8], calib.labels[:8])
    delta = np.zeros_like(cap.block_outputs[1])
    assert block_quant_loss(rings_net, cap, 2, delta) == 0.0


def test_block_quant_loss_shape_guard(rings_net, rings_data):
    calib, _ = rings_data
    cap = forward_capture(rings_net, calib.inputs[:8], calib.labels[:8])
    with pytest.raises(ConfigError):
        block_quant_loss(rings_net, cap, 2, np.zeros((3, 3)))
    with pytest.raises(ConfigError):
        block_quant_loss(rings_net, cap, 99, np.zeros_like(cap.block_outputs[0]))


def test_block_output_gradient_matches_finite_differences(rings_net, rings_data):
    calib, _ = rings_data
    x, y = calib.inputs[:4], calib.labels[:4]
    cap = forward_capture(rings_net, x, y)
    t = 2
    g = block_output_gradient(rings_net, cap, t)

    from packptq import tensor as T

    def f(zflat):
        z = Tensor(zflat.data.reshape(cap.block_outputs[t - 1].shape))
        logits = rings_net.tail(t, z)
        return T.reduce_mean(T.softmax_cross_entropy(logits, y))

    fd = finite_diff_gradient(f, Tensor(cap.block_outputs[t - 1].reshape(-1)), h=1e-5)
    assert_grad_close(g.data.reshape(-1), fd.data)


def test_zeroed_downstream_weights_give_zero_gradient(rings_net, rings_data):
    import copy

    calib, _ = rings_data
    net = copy.deepcopy(rings_net)
    net.head.w.data[:] = 0.0
    # with the head zeroed, logits are constant in z -> zero gradient everywhere
    cap = forward_capture(net, calib.inputs[:4], calib.labels[:4])
    g = block_output_gradient(net, cap, net.n_blocks)
    assert (g.data == 0.0).all()


def test_estimator_matches_oracle_on_fixture(rings_net, rings_data):
    calib, _ = rings_data
    t = 3
    entry = estimate_block_score(rings_net, calib, t,
                                 PerturbationConfig(num_samples=20000, seed=9))
    oracle = hessian_mean_oracle(rings_net, calib, t)
    assert abs(entry.score - oracle) <= 3.0 * entry.stderr_score + 1e-9


def test_score_all_blocks_structure_and_determinism(rings_net, rings_data):
    calib, _ = rings_data
    cfg = PerturbationConfig(num_samples=500, seed=3)
    a = score_all_blocks(rings_net, calib, cfg)
    b = score_all_blocks(rings_net, calib, cfg)
    assert len(a) == rings_net.n_blocks
    assert [e.block for e in a] == [1, 2, 3, 4]
    assert all(x.score == y.score for x, y in zip(a, b))
    assert all(e.denominator > 0 for e in a)


def test_identity_tail_blocks_share_scores(moons_net, moons_data):
    import copy

    calib, _ = moons_data
    net = copy.deepcopy(moons_net)
    # make blocks 7 and 8 exact pass-throughs: z6 = z7 = z8
    for block in net.blocks[6:]:
        for layer in block.layers:
            layer.w.data[:] = 0.0
            layer.b.data[:] = 0.0
    cfg = PerturbationConfig(num_samples=8000, seed=4)
    entries = score_all_blocks(net, calib, cfg)
    s6, s7, s8 = entries[5], entries[6], entries[7]
    for a, b in ((s6, s7), (s7, s8)):
        se = np.hypot(a.stderr_score, b.stderr_score)
        assert abs(a.score - b.score) <= 3.0 * se


def test_non_finite_loss_names_sigma(moons_net, moons_data):
    calib, _ = moons_data
    with pytest.raises(NumericalError, match="sigma"):
        estimate_block_score(moons_net, calib, 1,
                             PerturbationConfig(sigma=1e160, num_samples=64, seed=0))
