from __future__ import annotations

import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from shotmeta import oracles
from shotmeta.errors import GraphError, NonFiniteError, ShapeError
from shotmeta.tensor import (
    Graph,
    Tensor,
    add,
    backward,
    broadcast_to,
    div,
    dot,
    exp,
    grad,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    scale,
    square,
    sub,
    transpose,
    tsum,
)

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def _num_grad(fn, x):
    return oracles.central_diff_grad(lambda v: fn(Tensor(v.reshape(x.shape))).item(), x.ravel()).reshape(x.shape)


def _ad_grad(fn, x):
    leaf = Tensor(x, requires_grad=True)
    return grad(fn(leaf), [leaf])[0].data


# -- forward examples --------------------------------------------------------------
def test_matmul_example():
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_relu_example():
    np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_sum_of_empty_is_zero():
    assert tsum(Tensor(np.zeros((0, 3)))).item() == 0.0


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ShapeError) as exc:
        add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    assert "add" in str(exc.value) and "(3,)" in str(exc.value) and "(4,)" in str(exc.value)
    with pytest.raises(ShapeError, match="matmul"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_scalar_operand_is_allowed_and_gradient_sums():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    c = Tensor(2.0, requires_grad=True)
    gx, gc = grad(tsum(mul(x, c)), [x, c])
    np.testing.assert_array_equal(gx.data, [2.0, 2.0, 2.0])
    assert gc.item() == 6.0


def test_non_finite_result_raises():
    with pytest.raises(NonFiniteError, match="log"):
        log(Tensor([0.0]))
    with pytest.raises(NonFiniteError):
        exp(Tensor([1000.0]))


# -- backward examples ----------------------------------------------------------------
def test_sum_of_squares_gradient():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    grads = backward(tsum(mul(x, x)))
    np.testing.assert_array_equal(grads[x].data, [2.0, 4.0, 6.0])


def test_second_derivative_of_square_is_two():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    (g,) = grad(tsum(mul(x, x)), [x], create_graph=True)
    (h,) = grad(tsum(g), [x])
    np.testing.assert_array_equal(h.data, [2.0, 2.0, 2.0])
    x0 = Tensor(np.array([1.5]), requires_grad=True)
    (g0,) = grad(tsum(mul(x0, x0)), [x0], create_graph=True)
    (h0,) = grad(tsum(g0), [x0])
    assert h0.item() == 2.0


def test_non_scalar_root_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(GraphError, match="scalar"):
        backward(mul(x, x))


def test_foreign_graph_node_rejected():
    with Graph():
        a = Tensor([1.0], requires_grad=True)
        la = tsum(mul(a, a))
    with Graph():
        b = Tensor([2.0], requires_grad=True)
        lb = tsum(mul(b, b))
        with pytest.raises(GraphError):
            grad(lb, [a])
        with pytest.raises(GraphError):
            add(la, lb)


def test_unreachable_input_gets_zero_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([3.0], requires_grad=True)
    gx, gy = grad(tsum(mul(x, x)), [x, y])
    np.testing.assert_array_equal(gy.data, [0.0])


def test_no_grad_builds_no_graph():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = mul(x, x)
    assert not y.requires_grad and y.is_leaf


def test_shared_subexpression_visited_once():
    # diamond: y = x*x used twice; gradient of sum(y + y) is 4x
    x = Tensor([1.0, -2.0], requires_grad=True)
    y = mul(x, x)
    (g,) = grad(tsum(add(y, y)), [x])
    np.testing.assert_array_equal(g.data, [4.0, -8.0])


def test_deep_chain_has_no_recursion_limit():
    x = Tensor([1.0], requires_grad=True)
    y = x
    for _ in range(5000):
        y = scale(y, 1.0)
    (g,) = grad(tsum(y), [x])
    assert g.item() == 1.0


def test_graphs_on_separate_threads_do_not_interfere():
    results = {}

    def work(k):
        with Graph():
            x = Tensor(np.arange(4.0) + k, requires_grad=True)
            (g,) = grad(tsum(mul(x, x)), [x])
            results[k] = g.data

    threads = [threading.Thread(target=work, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for k in range(4):
        np.testing.assert_array_equal(results[k], 2 * (np.arange(4.0) + k))


# -- every op vs finite differences ------------------------------------------------------
UNARY = {
    "relu": lambda t: tsum(relu(t)),
    "exp": lambda t: tsum(exp(t)),
    "log": lambda t: tsum(log(add(square(t), Tensor(1.0)))),
    "square": lambda t: tsum(square(t)),
    "mean": lambda t: mean(mul(t, t)),
    "mean_axis": lambda t: tsum(square(mean(t, axis=0))),
    "sum_axis_keep": lambda t: tsum(square(tsum(t, axis=1, keepdims=True))),
    "reshape": lambda t: tsum(mul(reshape(t, (t.size,)), Tensor(np.arange(t.size, dtype=float)))),
    "transpose": lambda t: tsum(matmul(transpose(t), t)),
    "broadcast": lambda t: tsum(square(broadcast_to(tsum(t, axis=0), (3, t.shape[1])))),
    "div": lambda t: tsum(div(t, add(square(t), Tensor(1.0)))),
    "sub_neg": lambda t: tsum(square(sub(-t, scale(t, 0.5)))),
    "dot": lambda t: dot(reshape(t, (t.size,)), reshape(exp(t), (t.size,))),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@given(x=arrays(np.float64, (3, 4), elements=finite))
def test_op_gradient_matches_finite_differences(name, x):
    fn = UNARY[name]
    if name == "relu":
        x = np.where(np.abs(x) < 1e-3, 0.5, x)  # stay off the kink
    ad = _ad_grad(fn, x)
    fd = _num_grad(fn, x)
    assert oracles.rel_error(ad, fd) < 1e-6


@given(a=arrays(np.float64, (3, 2), elements=finite), b=arrays(np.float64, (2, 4), elements=finite))
def test_matmul_gradients(a, b):
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    ga, gb = grad(tsum(square(matmul(ta, tb))), [ta, tb])
    fa = oracles.central_diff_grad(lambda v: float(np.sum((v.reshape(3, 2) @ b) ** 2)), a.ravel())
    fb = oracles.central_diff_grad(lambda v: float(np.sum((a @ v.reshape(2, 4)) ** 2)), b.ravel())
    assert oracles.rel_error(ga.data.ravel(), fa) < 1e-6
    assert oracles.rel_error(gb.data.ravel(), fb) < 1e-6


@given(x=arrays(np.float64, (5,), elements=finite))
def test_double_backward_matches_analytic_hessian(x):
    # f = sum(exp(x) * x), f'' = exp(x) * (x + 2) on the diagonal
    t = Tensor(x, requires_grad=True)
    (g,) = grad(tsum(mul(exp(t), t)), [t], create_graph=True)
    v = np.linspace(-1, 1, 5)
    (hv,) = grad(tsum(mul(g, Tensor(v))), [t])
    np.testing.assert_allclose(hv.data, np.exp(x) * (x + 2) * v, rtol=1e-12, atol=1e-12)


def test_operator_overloads_match_functions():
    a = Tensor([1.0, 2.0])
    b = Tensor([3.0, 5.0])
    np.testing.assert_array_equal((a + b).data, add(a, b).data)
    np.testing.assert_array_equal((a - b).data, sub(a, b).data)
    np.testing.assert_array_equal((a * b).data, mul(a, b).data)
    np.testing.assert_array_equal((a / b).data, div(a, b).data)
    np.testing.assert_array_equal((2.0 * a).data, [2.0, 4.0])
