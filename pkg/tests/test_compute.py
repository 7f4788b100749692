import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from plangen import compute as C
from plangen.compute import Tensor


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Independent oracle: numeric gradient of scalar f(ndarray) by central differences."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b, floor=1e-6):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    a = Tensor([[1, 2], [3, 4]])
    np.testing.assert_array_equal(C.matmul(Tensor(np.eye(2)), a).data, [[1, 2], [3, 4]])


def test_matmul_values():
    out = C.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5, 6], [7, 8]]))
    np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])


def test_matmul_shape_error_names_shapes():
    with pytest.raises(C.ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        C.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))


def test_matmul_gradient_matches_fd():
    rng = np.random.default_rng(0)
    a0, b0 = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    a = Tensor(a0, requires_grad=True)
    C.backward(C.sum_all(C.matmul(a, Tensor(b0))))
    fd = central_diff(lambda x: float((x @ b0).sum()), a0)
    assert rel_err(a.grad, fd) < 1e-6


# ---------------------------------------------------------------- elementwise

def test_tanh_and_sigmoid_at_zero():
    x = Tensor(0.0, requires_grad=True)
    y = C.tanh(x)
    C.backward(y)
    assert y.item() == 0.0 and x.grad[0, 0] == 1.0
    x = Tensor(0.0, requires_grad=True)
    y = C.sigmoid(x)
    C.backward(y)
    assert y.item() == 0.5 and x.grad[0, 0] == 0.25


def test_exp_log_inverse():
    v = np.random.default_rng(1).uniform(0.1, 5.0, size=(1, 20))
    np.testing.assert_allclose(C.exp(C.log(Tensor(v))).data, v, rtol=1e-12, atol=0)


def test_log_domain_error():
    with pytest.raises(C.DomainError):
        C.log(Tensor([[1.0, 0.0]]))


def test_binary_shape_mismatch():
    with pytest.raises(C.ShapeError):
        C.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_scalar_broadcast():
    out = C.mul(Tensor(np.ones((2, 3))), 2.0)
    np.testing.assert_array_equal(out.data, np.full((2, 3), 2.0))


@pytest.mark.parametrize("kind", ["add", "sub", "mul", "div"])
def test_binary_gradients_with_broadcast(kind):
    rng = np.random.default_rng(2)
    a0 = rng.uniform(0.5, 2.0, size=(3, 4))
    b0 = rng.uniform(0.5, 2.0, size=(1, 4))
    a, b = Tensor(a0, requires_grad=True), Tensor(b0, requires_grad=True)
    w = rng.normal(size=(3, 4))
    C.backward(C.sum_all(C.elementwise(kind, a, b) * Tensor(w)))
    ops = {"add": np.add, "sub": np.subtract, "mul": np.multiply, "div": np.divide}
    fa = central_diff(lambda x: float((ops[kind](x, b0) * w).sum()), a0)
    fb = central_diff(lambda x: float((ops[kind](a0, x) * w).sum()), b0)
    assert rel_err(a.grad, fa) < 1e-6
    assert rel_err(b.grad, fb) < 1e-6


@pytest.mark.parametrize("kind", ["tanh", "sigmoid", "exp", "log", "softplus"])
def test_unary_gradients(kind):
    rng = np.random.default_rng(3)
    x0 = rng.uniform(0.2, 2.0, size=(2, 5))
    w = rng.normal(size=(2, 5))
    fns = {"tanh": np.tanh, "sigmoid": lambda v: 1 / (1 + np.exp(-v)), "exp": np.exp, "log": np.log,
           "softplus": lambda v: np.log1p(np.exp(v))}
    x = Tensor(x0, requires_grad=True)
    C.backward(C.sum_all(C.elementwise(kind, x) * Tensor(w)))
    assert rel_err(x.grad, central_diff(lambda v: float((fns[kind](v) * w).sum()), x0)) < 1e-6


def test_sigmoid_saturates_exactly():
    out = C.sigmoid(Tensor([[-1000.0, 1000.0]])).data
    assert out[0, 0] == 0.0 and out[0, 1] == 1.0


# ---------------------------------------------------------------- softmax

def test_softmax_examples():
    np.testing.assert_array_equal(C.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])
    np.testing.assert_allclose(C.softmax_rows(Tensor([[math.log(3), 0.0]])).data, [[0.75, 0.25]], rtol=1e-15)
    np.testing.assert_allclose(C.softmax_rows(Tensor(np.ones((1, 5)))).data, np.full((1, 5), 0.2), rtol=1e-15)


def test_softmax_stable_for_large_logits():
    out = C.softmax_rows(Tensor([[1000.0, 1000.0, -1000.0]])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [[0.5, 0.5, 0.0]])


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (3, 6), elements=st.floats(-1e6, 1e6)))
def test_softmax_rows_sum_to_one(x):
    out = C.softmax_rows(Tensor(x)).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9, rtol=0)


def test_softmax_and_log_softmax_gradients():
    rng = np.random.default_rng(4)
    x0 = rng.normal(size=(3, 5))
    w = rng.normal(size=(3, 5))

    def sm(v):
        e = np.exp(v - v.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    x = Tensor(x0, requires_grad=True)
    C.backward(C.sum_all(C.softmax_rows(x) * Tensor(w)))
    assert rel_err(x.grad, central_diff(lambda v: float((sm(v) * w).sum()), x0)) < 1e-6
    x = Tensor(x0, requires_grad=True)
    C.backward(C.sum_all(C.log_softmax_rows(x) * Tensor(w)))
    assert rel_err(x.grad, central_diff(lambda v: float((np.log(sm(v)) * w).sum()), x0)) < 1e-6


# ---------------------------------------------------------------- layer norm

def test_layer_norm_constant_row_is_zero():
    out = C.layer_norm(Tensor(np.full((1, 4), 3.0)), Tensor(np.ones((1, 4))), Tensor(np.zeros((1, 4))))
    np.testing.assert_array_equal(out.data, np.zeros((1, 4)))


def test_layer_norm_two_values():
    out = C.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones((1, 2))), Tensor(np.zeros((1, 2))))
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-4)


def test_layer_norm_gradient():
    rng = np.random.default_rng(5)
    x0, g0, b0 = rng.normal(size=(2, 6)), rng.normal(size=(1, 6)), rng.normal(size=(1, 6))
    w = rng.normal(size=(2, 6))

    def ln(x, g, b):
        mu = x.mean(axis=1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-5) * g + b

    x, g, b = (Tensor(v, requires_grad=True) for v in (x0, g0, b0))
    C.backward(C.sum_all(C.layer_norm(x, g, b) * Tensor(w)))
    assert rel_err(x.grad, central_diff(lambda v: float((ln(v, g0, b0) * w).sum()), x0)) < 1e-5
    assert rel_err(g.grad, central_diff(lambda v: float((ln(x0, v, b0) * w).sum()), g0)) < 1e-5
    assert rel_err(b.grad, central_diff(lambda v: float((ln(x0, g0, v) * w).sum()), b0)) < 1e-5


def test_layer_norm_shape_check():
    with pytest.raises(C.ShapeError):
        C.layer_norm(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 2))), Tensor(np.zeros((1, 2))))


# ---------------------------------------------------------------- structural ops

def test_structural_op_gradients():
    rng = np.random.default_rng(6)
    a0, b0 = rng.normal(size=(3, 4)), rng.normal(size=(2, 4))
    w = rng.normal(size=(6, 4))

    def f_np(a, b):
        grid = (a[:, None, :] + b[None, :, :]).reshape(6, 4)
        return float((grid * w).sum() + (a[1:, 2:] ** 2).sum() + (np.concatenate([a, b]).T @ np.ones((5, 1))).sum())

    a, b = Tensor(a0, requires_grad=True), Tensor(b0, requires_grad=True)
    sl = a[1:, 2:]
    loss = (C.sum_all(C.outer_add(a, b) * Tensor(w)) + C.sum_all(sl * sl)
            + C.sum_all(C.matmul(C.transpose(C.concat([a, b], axis=0)), Tensor(np.ones((5, 1))))))
    C.backward(loss)
    assert rel_err(a.grad, central_diff(lambda v: f_np(v, b0), a0)) < 1e-6
    assert rel_err(b.grad, central_diff(lambda v: f_np(a0, v), b0)) < 1e-6


def test_gather_rows_scatters_gradient():
    table = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
    C.backward(C.sum_all(C.gather_rows(table, [2, 0, 2])))
    np.testing.assert_array_equal(table.grad, [[1, 1, 1], [0, 0, 0], [2, 2, 2], [0, 0, 0]])


def test_reshape_roundtrip_gradient():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    C.backward(C.sum_all(C.reshape(x, 3, 2) * Tensor(np.arange(6.0).reshape(3, 2))))
    np.testing.assert_array_equal(x.grad, np.arange(6.0).reshape(2, 3))


def test_straight_through_passes_gradient():
    soft = Tensor([[0.2, 0.8]], requires_grad=True)
    st_ = C.straight_through(np.array([[0.0, 1.0]]), soft)
    np.testing.assert_array_equal(st_.data, [[0.0, 1.0]])
    C.backward(C.sum_all(st_ * Tensor([[3.0, 5.0]])))
    np.testing.assert_array_equal(soft.grad, [[3.0, 5.0]])


# ---------------------------------------------------------------- backward

def test_backward_identity():
    x = Tensor(2.0, requires_grad=True)
    C.backward(x * 1.0)
    assert x.grad[0, 0] == 1.0


def test_backward_sum_of_squares():
    x = Tensor([[1.0, 2.0]], requires_grad=True)
    C.backward(C.sum_all(x * x))
    np.testing.assert_array_equal(x.grad, [[2.0, 4.0]])


def test_backward_rejects_non_scalar():
    x = Tensor([[1.0, 2.0]], requires_grad=True)
    with pytest.raises(C.ContractError):
        C.backward(x * 2.0)


def test_reused_tensor_accumulates():
    x = Tensor([[3.0]], requires_grad=True)
    y = C.tanh(x)
    C.backward(y * y + y)
    t = np.tanh(3.0)
    np.testing.assert_allclose(x.grad, [[(2 * t + 1) * (1 - t * t)]], rtol=1e-14)


def test_tape_order_is_topological():
    x = Tensor([[0.3, -0.2]], requires_grad=True)
    loss = C.sum_all(C.tanh(x) * C.sigmoid(x))
    tape = C.GradientTape.collect(loss)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    for node in tape.nodes:
        for p in node._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(node)]
    assert len({id(n) for n in tape.nodes}) == len(tape)


def test_no_grad_records_nothing():
    x = Tensor([[1.0]], requires_grad=True)
    with C.no_grad():
        y = C.tanh(x)
    assert not y.requires_grad and y._parents == ()


def test_forward_is_bit_identical():
    rng = np.random.default_rng(7)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    r1 = C.softmax_rows(C.tanh(C.matmul(Tensor(a), Tensor(b)))).data
    r2 = C.softmax_rows(C.tanh(C.matmul(Tensor(a), Tensor(b)))).data
    assert np.array_equal(r1, r2)


# ---------------------------------------------------------------- grad_check

def test_grad_check_tanh_at_zero():
    x = Tensor(0.0, requires_grad=True, name="x")
    rep = C.grad_check(lambda: C.tanh(x), [x], h=1e-5)
    assert rep.errors["x"] < 1e-8 and rep.passed


def test_grad_check_detects_corrupted_rule():
    x = Tensor([[0.4, -0.7]], requires_grad=True, name="x")

    def bad_square(t):
        return C._node(t.data ** 2, (t,), lambda g: (g * 3.0 * t.data,))

    rep = C.grad_check(lambda: C.sum_all(bad_square(x)), [x])
    assert not rep.passed and rep.errors["x"] > rep.tol


def test_grad_check_rejects_nondeterminism():
    x = Tensor([[0.4]], requires_grad=True, name="x")
    rng = np.random.default_rng(0)
    with pytest.raises(C.OracleInvalidError):
        C.grad_check(lambda: C.sum_all(x * float(rng.normal())), [x])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_random_composite_gradients(seed):
    rng = np.random.default_rng(seed)
    w = Tensor(rng.normal(size=(4, 3)), requires_grad=True, name="w")
    x = Tensor(rng.normal(size=(2, 4)), requires_grad=True, name="x")
    g = Tensor(rng.uniform(0.5, 1.5, size=(1, 3)), requires_grad=True, name="g")

    def f():
        hdn = C.layer_norm(C.matmul(x, w), g, Tensor(np.zeros((1, 3))))
        return C.sum_all(C.log_softmax_rows(C.tanh(hdn)) * Tensor([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]))

    assert C.grad_check(f, [w, x, g]).passed
