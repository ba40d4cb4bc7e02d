import math

import numpy as np
import pytest
from helpers import cholesky_qr, fd_grad, rel_err

from stiefel_maml.autodiff import (
    Graph,
    GraphError,
    NonFiniteError,
    RankDeficientError,
    ShapeError,
    as_matrix,
    backward_grads,
    forward_eval,
    qr_backward,
    qr_thin,
)


def scalar_graph(build, shapes):
    """Graph computing sum(C * build(inputs)) with a fixed random C."""
    g = Graph()
    xs = [g.input(f"x{i}", s) for i, s in enumerate(shapes)]
    out = build(g, *xs)
    c = g.input("c", out.shape)
    loss = g.total(g.mul(out, c))
    return g, loss


def run(g, loss, feed):
    return float(forward_eval(g, feed, loss)[0, 0])


# op name -> (builder, input shapes, input transform keeping inputs in a smooth region)
OPS = {
    "matmul": (lambda g, a, b: g.matmul(a, b), [(3, 4), (4, 2)]),
    "add": (lambda g, a, b: g.add(a, b), [(3, 2), (3, 2)]),
    "sub": (lambda g, a, b: g.sub(a, b), [(3, 2), (3, 2)]),
    "scale": (lambda g, a: g.scale(a, -1.7), [(3, 2)]),
    "mul": (lambda g, a, b: g.mul(a, b), [(3, 2), (3, 2)]),
    "mul_scalar": (lambda g, a, b: g.mul(a, b), [(3, 2), (1, 1)]),
    "transpose": (lambda g, a: g.transpose(a), [(3, 2)]),
    "tanh": (lambda g, a: g.tanh(a), [(3, 2)]),
    "relu": (lambda g, a: g.relu(a), [(3, 2)]),
    "exp": (lambda g, a: g.exp(a), [(3, 2)]),
    "total": (lambda g, a: g.total(a), [(3, 2)]),
    "sumsq": (lambda g, a: g.sumsq(a), [(3, 2)]),
    "softmax": (lambda g, a: g.softmax(a), [(3, 4)]),
    "log_softmax": (lambda g, a: g.log_softmax(a), [(3, 4)]),
    "qr_q": (lambda g, a: g.qr_q(a), [(5, 3)]),
}


@pytest.mark.parametrize("op", sorted(OPS))
def test_primitive_grads_match_fd(op):
    build, shapes = OPS[op]
    g, loss = scalar_graph(build, shapes)
    names = [f"x{i}" for i in range(len(shapes))]
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        feed = {n: rng.standard_normal(s) for n, s in zip(names, shapes)}
        if op == "relu":
            # stay away from the kink
            feed["x0"] = np.sign(feed["x0"]) * (0.1 + np.abs(feed["x0"]))
        feed["c"] = rng.standard_normal(loss.graph.inputs["c"].shape)
        run(g, loss, feed)
        grads = backward_grads(g, loss, names)
        for n in names:
            def f(v, n=n):
                return run(g, loss, {**feed, n: v})
            worst = max(worst, rel_err(grads[n], fd_grad(f, feed[n])))
    assert worst <= 1e-5, f"{op}: worst relative error {worst:.2e}"


def test_softmax_ce_grad_matches_fd():
    g = Graph()
    z = g.input("z", (4, 3))
    y = g.input("y", (4, 3))
    loss = g.softmax_ce(z, y)
    for seed in range(100):
        rng = np.random.default_rng(seed)
        onehot = np.eye(3)[rng.integers(0, 3, 4)]
        zv = rng.standard_normal((4, 3)) * 2
        run(g, loss, {"z": zv, "y": onehot})
        grad = backward_grads(g, loss, ["z"])["z"]
        num = fd_grad(lambda v: run(g, loss, {"z": v, "y": onehot}), zv)
        assert rel_err(grad, num) <= 1e-5


def test_dot_product_example():
    g = Graph()
    x = g.input("x", (2, 1))
    out = g.matmul(g.transpose(x), x)
    assert forward_eval(g, {"x": [3.0, 4.0]}, out)[0, 0] == 25.0
    grads = backward_grads(g, out)
    np.testing.assert_array_equal(grads["x"], [[6.0], [8.0]])


def test_tanh_of_zero_is_zero():
    g = Graph()
    x = g.input("x", (2, 3))
    out = g.tanh(x)
    np.testing.assert_array_equal(forward_eval(g, {"x": np.zeros((2, 3))}, out), np.zeros((2, 3)))


def test_softmax_ce_uniform_two_class():
    g = Graph()
    z = g.input("z", (1, 2))
    y = g.input("y", (1, 2))
    out = g.softmax_ce(z, y)
    val = forward_eval(g, {"z": [[0.0, 0.0]], "y": [[1.0, 0.0]]}, out)[0, 0]
    assert val == pytest.approx(math.log(2), abs=1e-15)
    assert round(val, 4) == 0.6931


def test_unused_input_gets_zero_gradient():
    g = Graph()
    x = g.input("x", (2, 2))
    w = g.input("w", (1, 1))
    out = g.sumsq(w)
    forward_eval(g, {"x": np.ones((2, 2)), "w": [[2.0]]}, out)
    grads = backward_grads(g, out)
    np.testing.assert_array_equal(grads["x"], np.zeros((2, 2)))
    assert grads["w"][0, 0] == 4.0
    assert x.shape == (2, 2)


def test_norm_of_wv_matches_fd():
    rng = np.random.default_rng(3)
    wv = rng.standard_normal((3, 2))
    vv = rng.standard_normal((2, 1))
    g = Graph()
    w = g.input("w", (3, 2))
    v = g.input("v", (2, 1))
    out = g.sumsq(g.matmul(w, v))
    run(g, out, {"w": wv, "v": vv})
    grad = backward_grads(g, out, ["w"])["w"]
    num = fd_grad(lambda m: run(g, out, {"w": m, "v": vv}), wv)
    assert rel_err(grad, num) <= 1e-6


def test_backward_requires_scalar_output():
    g = Graph()
    x = g.input("x", (2, 2))
    out = g.tanh(x)
    forward_eval(g, {"x": np.ones((2, 2))}, out)
    with pytest.raises(GraphError):
        backward_grads(g, out)


def test_backward_requires_forward():
    g = Graph()
    x = g.input("x", (2, 1))
    out = g.sumsq(x)
    with pytest.raises(GraphError):
        backward_grads(g, out)


def test_shape_mismatch_names_node():
    g = Graph()
    a = g.input("a", (2, 3))
    b = g.input("b", (2, 3))
    with pytest.raises(ShapeError) as info:
        g.matmul(a, b)
    assert info.value.node_id == g.nodes[-1].id + 1


def test_input_shape_checked_at_evaluation():
    g = Graph()
    x = g.input("x", (2, 2))
    out = g.sumsq(x)
    with pytest.raises(ShapeError):
        forward_eval(g, {"x": np.ones((3, 2))}, out)
    with pytest.raises(GraphError):
        forward_eval(g, {}, out)


def test_nonfinite_input_rejected():
    with pytest.raises(ValueError):
        as_matrix([[1.0, np.nan]])
    g = Graph()
    x = g.input("x", (1, 2))
    out = g.sumsq(x)
    with pytest.raises(ArithmeticError):
        forward_eval(g, {"x": [[np.inf, 0.0]]}, out)


def test_nonfinite_intermediate_reports_node():
    g = Graph()
    x = g.input("x", (1, 1))
    e = g.exp(x)
    out = g.sumsq(e)
    with pytest.raises(NonFiniteError) as info:
        forward_eval(g, {"x": [[800.0]]}, out)
    assert info.value.node_id == e.id


def test_evaluation_is_bitwise_deterministic():
    rng = np.random.default_rng(0)
    feed = {"a": rng.standard_normal((6, 3)), "b": rng.standard_normal((3, 2))}

    def once():
        g = Graph()
        a = g.input("a", (6, 3))
        b = g.input("b", (3, 2))
        loss = g.sumsq(g.tanh(g.matmul(g.qr_q(a), b)))
        run(g, loss, feed)
        return backward_grads(g, loss)

    first, second = once(), once()
    for k in first:
        assert np.array_equal(first[k], second[k])


def test_second_order_hessian_vector_product():
    # f(x) = sum(tanh(Ax)^2); d/dx <grad f, v> checked against FD of grad f
    rng = np.random.default_rng(7)
    av = rng.standard_normal((4, 3))
    xv = rng.standard_normal((3, 1))
    vv = rng.standard_normal((3, 1))
    g = Graph()
    a = g.input("a", (4, 3))
    x = g.input("x", (3, 1))
    v = g.input("v", (3, 1))
    f = g.sumsq(g.tanh(g.matmul(a, x)))
    (gx,) = g.gradients(f, [x])
    gv = g.total(g.mul(gx, v))
    (hv,) = g.gradients(gv, [x])
    feed = {"a": av, "x": xv, "v": vv}
    got = g.evaluate(feed, hv)

    def grad_at(p):
        g.evaluate({**feed, "x": p}, gx)
        return g.values[gx.id].copy()

    h = 1e-5
    num = (grad_at(xv + h * vv) - grad_at(xv - h * vv)) / (2 * h)
    assert rel_err(got, num) <= 1e-6


# ---------------------------------------------------------------- thin QR


def test_qr_identity():
    q, r = qr_thin(np.eye(3))
    np.testing.assert_array_equal(q, np.eye(3))
    np.testing.assert_array_equal(r, np.eye(3))


def test_qr_single_column():
    q, r = qr_thin([[3.0], [4.0]])
    np.testing.assert_allclose(q, [[0.6], [0.8]], atol=1e-15)
    np.testing.assert_allclose(r, [[5.0]], atol=1e-15)


def test_qr_positive_diagonal_convention():
    q, r = qr_thin([[2.0, 0.0], [0.0, 3.0]])
    np.testing.assert_allclose(q, np.eye(2), atol=1e-15)
    np.testing.assert_allclose(r, np.diag([2.0, 3.0]), atol=1e-15)
    q, r = qr_thin([[-2.0, 0.0], [0.0, 3.0]])
    np.testing.assert_allclose(q, np.diag([-1.0, 1.0]), atol=1e-15)
    assert (np.diag(r) > 0).all()


@pytest.mark.parametrize("shape", [(1, 1), (5, 2), (8, 8), (20, 7), (64, 32)])
def test_qr_reconstruction_and_orthonormality(shape):
    for seed in range(20):
        a = np.random.default_rng(seed).standard_normal(shape)
        q, r = qr_thin(a)
        assert np.linalg.norm(a - q @ r) <= 1e-10 * np.linalg.norm(a)
        assert np.linalg.norm(q.T @ q - np.eye(shape[1])) <= 1e-12
        assert np.array_equal(r, np.triu(r))
        assert (np.diag(r) > 0).all()


def test_qr_matches_cholesky_oracle():
    for seed in range(50):
        a = np.random.default_rng(seed).standard_normal((9, 4))
        q, r = qr_thin(a)
        q2, r2 = cholesky_qr(a)
        np.testing.assert_allclose(q, q2, atol=1e-10)
        np.testing.assert_allclose(r, r2, atol=1e-10)


def test_qr_rank_deficient_names_column():
    a = np.array([[1.0, 2.0, 0.0], [0.0, 0.0, 1.0], [1.0, 2.0, 0.0], [0.0, 0.0, 0.0]])
    with pytest.raises(RankDeficientError) as info:
        qr_thin(a)
    assert info.value.column == 1


def test_qr_rejects_wide():
    with pytest.raises(ValueError):
        qr_thin(np.ones((2, 3)))


def test_qr_backward_zero_cotangent():
    a = np.random.default_rng(0).standard_normal((6, 3))
    q, r = qr_thin(a)
    np.testing.assert_array_equal(qr_backward(q, r, np.zeros((6, 3))), np.zeros((6, 3)))


def test_qr_backward_scalar_case():
    q, r = qr_thin([[2.0]])
    np.testing.assert_allclose(qr_backward(q, r, np.array([[1.0]])), [[0.0]], atol=1e-15)


def test_qr_backward_matches_fd():
    h = 1e-5
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((6, 3))
        dq = rng.standard_normal((6, 3))
        da_dir = rng.standard_normal((6, 3))
        q, r = qr_thin(a)
        analytic = float(np.vdot(qr_backward(q, r, dq), da_dir))
        num = (np.vdot(qr_thin(a + h * da_dir)[0], dq) - np.vdot(qr_thin(a - h * da_dir)[0], dq)) / (2 * h)
        worst = max(worst, abs(analytic - num) / max(abs(analytic), abs(num)))
    assert worst <= 1e-4


def test_qr_backward_shape_and_conditioning_errors():
    q, r = qr_thin(np.random.default_rng(1).standard_normal((5, 2)))
    with pytest.raises(ValueError):
        qr_backward(q, r, np.zeros((5, 3)))
    bad = r.copy()
    bad[1, 1] = 1e-15
    with pytest.raises(np.linalg.LinAlgError):
        qr_backward(q, bad, np.ones((5, 2)))


def test_qr_node_third_order_unsupported():
    g = Graph()
    a = g.input("a", (4, 2))
    f = g.sumsq(g.total(g.qr_q(a)))
    (ga,) = g.gradients(f, [a])
    s = g.sumsq(ga)
    with pytest.raises(GraphError):
        g.gradients(g.sumsq(g.gradients(s, [a])[0]), [a])
