import math

import numpy as np
import pytest

from packptq import tensor as T
from packptq.errors import NumericalError, ShapeError
from packptq.tensor import OpGraph, Tensor, backward, finite_diff_gradient, forward_eval

from conftest import assert_grad_close


def test_matmul_hand_case():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[1.0], [1.0]])
    assert T.matmul(a, b).data.tolist() == [[3.0], [7.0]]


def test_relu_hand_case():
    assert T.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_uniform_logits_cross_entropy_is_log2():
    loss = T.softmax_cross_entropy(Tensor([[0.0, 0.0]]), np.array([0]))
    assert loss.data[0] == pytest.approx(math.log(2.0), abs=1e-12)


def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    loss = T.reduce_sum(T.mul(x, x))
    grads = backward(loss, [x])
    assert grads[id(x)].data.tolist() == [2.0, 4.0, 6.0]


def test_backward_product_rule():
    x = Tensor([3.0], requires_grad=True)
    y = Tensor([5.0], requires_grad=True)
    loss = T.reduce_sum(T.mul(x, y))
    grads = backward(loss, [x, y])
    assert grads[id(x)].data.tolist() == [5.0]
    assert grads[id(y)].data.tolist() == [3.0]


def test_backward_two_layer_mlp_matches_finite_differences():
    rng = np.random.default_rng(0)
    w1 = Tensor(rng.standard_normal((4, 8)), requires_grad=True)
    b1 = Tensor(rng.standard_normal(8), requires_grad=True)
    w2 = Tensor(rng.standard_normal((8, 3)), requires_grad=True)
    x = Tensor(rng.standard_normal((6, 4)))
    labels = rng.integers(0, 3, size=6)

    def forward(w1v, b1v, w2v):
        h = T.gelu(T.bias_add(T.matmul(x, w1v), b1v))
        return T.reduce_mean(T.softmax_cross_entropy(T.matmul(h, w2v), labels))

    grads = backward(forward(w1, b1, w2), [w1, b1, w2])
    for p in (w1, b1, w2):
        def f(v, p=p):
            vals = {w1: w1.data, b1: b1.data, w2: w2.data}
            vals[p] = v.data.reshape(p.shape)
            return forward(Tensor(vals[w1]), Tensor(vals[b1]), Tensor(vals[w2]))

        fd = finite_diff_gradient(f, Tensor(p.data.reshape(-1)), h=1e-5)
        assert_grad_close(grads[id(p)].data.reshape(-1), fd.data)


def test_gradients_of_unreached_params_are_zero():
    x = Tensor([1.0, 2.0], requires_grad=True)
    unused = Tensor([5.0], requires_grad=True)
    loss = T.reduce_sum(T.mul(x, x))
    grads = backward(loss, [x, unused])
    assert grads[id(unused)].data.tolist() == [0.0]


def test_backward_rejects_non_scalar_loss():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        backward(T.mul(x, x))


def test_backward_without_forward_errors():
    with pytest.raises(NumericalError):
        backward(Tensor(1.0, requires_grad=True))


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    with pytest.raises(ShapeError, match="add"):
        T.add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))


def test_finite_diff_hand_cases():
    fd = finite_diff_gradient(lambda v: T.reduce_sum(T.mul(v, v)), Tensor([1.0, 2.0]), h=1e-5)
    assert np.allclose(fd.data, [2.0, 4.0], atol=1e-6)

    fd = finite_diff_gradient(lambda v: Tensor(7.0), Tensor([1.0, 2.0, 3.0]))
    assert fd.data.tolist() == [0.0, 0.0, 0.0]

    fd = finite_diff_gradient(lambda v: float(np.sin(v.data).sum()), Tensor([0.0, math.pi / 2]))
    assert np.allclose(fd.data, [1.0, 0.0], atol=1e-8)


def test_finite_diff_rejects_non_finite():
    with pytest.raises(NumericalError):
        finite_diff_gradient(lambda v: float("nan"), Tensor([1.0]))


def test_frobenius_rows():
    x = Tensor([[3.0, 4.0], [0.0, 0.0]], requires_grad=True)
    norms = T.frobenius_rows(x)
    assert norms.data.tolist() == [5.0, 0.0]
    grads = backward(T.reduce_sum(norms), [x])
    assert np.allclose(grads[id(x)].data, [[0.6, 0.8], [0.0, 0.0]])


def random_graph(rng, max_layers: int = 5, max_params: int = 64):
    """Random composed graph over the declared primitive set, <= max_params."""
    conv = rng.random() < 0.3
    steps = []
    params = 0
    if conv:
        ch, hw = 2, 4
        shape = (ch, hw, hw)
        layers = rng.integers(1, max_layers + 1)
        for _ in range(layers):
            if params + ch * ch * 9 > max_params:
                break
            w = Tensor(rng.standard_normal((ch, ch, 3, 3)) * 0.5, requires_grad=True)
            inner = [("conv2d", w), ("relu",)]
            if rng.random() < 0.5:
                steps.append(("residual", inner))
            else:
                steps.extend(inner)
            params += w.size
    else:
        dim = int(rng.integers(2, 5))
        shape = (dim,)
        layers = rng.integers(1, max_layers + 1)
        for _ in range(layers):
            if params + dim * dim + dim > max_params:
                break
            w = Tensor(rng.standard_normal((dim, dim)) * 0.7, requires_grad=True)
            b = Tensor(rng.standard_normal(dim) * 0.1, requires_grad=True)
            act = ("gelu",) if rng.random() < 0.5 else ("relu",)
            inner = [("matmul", w), ("bias_add", b), act]
            if rng.random() < 0.5:
                steps.append(("residual", inner))
            else:
                steps.extend(inner)
            params += w.size + b.size
    return OpGraph(input_shape=shape, steps=steps)


def graph_loss(graph: OpGraph, x: Tensor) -> Tensor:
    out = forward_eval(graph, x)
    return T.reduce_mean(T.mul(out, out))


@pytest.mark.parametrize("seed", range(10))
def test_random_graph_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    graph = random_graph(rng)
    x = Tensor(rng.standard_normal((3,) + tuple(graph.input_shape)))
    params = graph.parameters()
    assert sum(p.size for p in params) <= 64
    grads = backward(graph_loss(graph, x), params)
    for p in params:
        def f(v, p=p):
            old = p.data
            p.data = v.data.reshape(p.shape)
            try:
                return graph_loss(graph, Tensor(x.data))
            finally:
                p.data = old

        fd = finite_diff_gradient(f, Tensor(p.data.reshape(-1)), h=1e-5)
        assert_grad_close(grads[id(p)].data.reshape(-1), fd.data)


def test_forward_eval_rejects_wrong_input_shape():
    graph = OpGraph(input_shape=(3,), steps=[("relu",)])
    with pytest.raises(ShapeError, match="forward_eval"):
        forward_eval(graph, Tensor(np.zeros((2, 4))))


def test_forward_eval_deterministic():
    rng = np.random.default_rng(3)
    graph = random_graph(rng)
    x = Tensor(rng.standard_normal((2,) + tuple(graph.input_shape)))
    a = forward_eval(graph, x).data
    b = forward_eval(graph, Tensor(x.data.copy())).data
    assert (a == b).all()
