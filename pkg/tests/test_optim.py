import numpy as np
import pytest

from packptq.errors import ShapeError
from packptq.optim import Adam, AdamState, adam_step, cosine_lr
from packptq.tensor import Tensor


def test_cosine_schedule_endpoints():
    assert cosine_lr(0.1, 0, 500) == 0.1
    assert cosine_lr(0.1, 500, 500) <= 1e-12 * 0.1
    assert cosine_lr(0.1, 250, 500) == pytest.approx(0.05)


def test_zero_gradient_leaves_params_unchanged():
    p = Tensor([1.0, -2.0], requires_grad=True)
    state = AdamState.init([p], base_lr=0.1, total_steps=10)
    adam_step([p], [np.zeros(2)], state)
    assert p.data.tolist() == [1.0, -2.0]
    assert state.step == 1


def test_update_moves_against_gradient():
    p = Tensor([0.0], requires_grad=True)
    state = AdamState.init([p], base_lr=0.1, total_steps=10)
    adam_step([p], [np.ones(1)], state)
    assert p.data[0] < 0.0


def test_quadratic_bowl_convergence():
    p = Tensor([0.0], requires_grad=True)
    state = AdamState.init([p], base_lr=0.1, total_steps=500)
    for _ in range(500):
        grad = 2.0 * (p.data - 3.0)
        adam_step([p], [grad], state)
    assert abs(p.data[0] - 3.0) < 0.05


def test_shape_mismatch_rejected():
    p = Tensor([0.0, 1.0], requires_grad=True)
    state = AdamState.init([p], base_lr=0.1, total_steps=10)
    with pytest.raises(ShapeError):
        adam_step([p], [np.zeros(3)], state)


def test_step_budget_enforced():
    p = Tensor([0.0], requires_grad=True)
    state = AdamState.init([p], base_lr=0.1, total_steps=1)
    adam_step([p], [np.ones(1)], state)
    with pytest.raises(ShapeError):
        adam_step([p], [np.ones(1)], state)


def test_adam_wrapper_reads_grads():
    p = Tensor([1.0], requires_grad=True)
    opt = Adam([p], base_lr=0.05, total_steps=5)
    p.grad = np.array([1.0])
    opt.step()
    assert p.data[0] < 1.0
    assert opt.state.step == 1
