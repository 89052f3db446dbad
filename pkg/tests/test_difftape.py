import numpy as np
import pytest

from patchprior import difftape as dt
from patchprior.errors import InvalidArgumentError, NumericalError, StateError, UnsupportedOpError


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def test_affine_identity():
    tape = dt.Tape()
    x = np.random.default_rng(0).standard_normal((4, 3))
    out = tape.affine(tape.input(x), tape.const(np.eye(3)), tape.const(np.zeros(3)))
    np.testing.assert_array_equal(out.value, x)


def test_affine_composition():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((5, 3))
    W1, b1, W2, b2 = rng.standard_normal((3, 4)), rng.standard_normal(4), rng.standard_normal((4, 2)), rng.standard_normal(2)
    tape = dt.Tape()
    out = tape.affine(tape.affine(tape.input(x), W1, b1), W2, b2)
    np.testing.assert_allclose(out.value, x @ (W1 @ W2) + (b1 @ W2 + b2), rtol=1e-12)


def test_sum_of_ones():
    tape = dt.Tape()
    assert float(tape.sum(tape.input(np.ones(7))).value) == 7.0


def test_half_sq_norm_gradient():
    x = np.random.default_rng(2).standard_normal(5)
    tape = dt.Tape()
    xin = tape.input(x)
    out = tape.scale(tape.sq_norm(xin), 0.5)
    np.testing.assert_allclose(tape.backward(out)[xin.id], x, rtol=1e-15)


def test_constant_node_gradient_zero():
    tape = dt.Tape()
    xin = tape.input(np.ones(3))
    c = tape.const(np.full(3, 2.0))
    out = tape.sum(tape.add(c, tape.scale(tape.sum(c), 0.0)))
    grads = tape.backward(out)
    assert xin.id not in grads or np.all(grads[xin.id] == 0)


def test_backward_before_forward():
    with pytest.raises(StateError):
        dt.Tape().backward(None)


def test_non_finite_raises():
    tape = dt.Tape()
    with pytest.raises(NumericalError):
        tape.log(tape.input(np.array([-1.0, 1.0])))


def test_mlp_gradients_match_fd():
    rng = np.random.default_rng(3)
    for act in ("tanh", "softplus", "sigmoid"):
        mlp = dt.MLP((3, 5, 4, 1), act)
        params = mlp.init(rng, {})
        x = rng.standard_normal((6, 3))

        def loss(p, x):
            return float(np.sum(mlp(x, p) ** 2))

        tape = dt.Tape()
        xin = tape.input(x)
        out = mlp.build(tape, xin, params)
        total = tape.sum(tape.mul(out, out))
        assert float(total.value) == pytest.approx(loss(params, x), rel=1e-14)
        grads = tape.backward(total)
        pg = dt.param_grads(tape, grads, params)
        assert rel_err(grads[xin.id], fd_grad(lambda z: loss(params, z), x)) < 1e-5
        for name in params:
            def f(w, name=name):
                q = dict(params)
                q[name] = w
                return loss(q, x)
            assert rel_err(pg[name], fd_grad(f, params[name])) < 1e-5, (act, name)


OPS = [
    lambda t, a, b: t.tanh(a),
    lambda t, a, b: t.sigmoid(a),
    lambda t, a, b: t.softplus(a),
    lambda t, a, b: t.exp(t.scale(a, 0.3)),
    lambda t, a, b: t.log(t.add(t.mul(a, a), 1.0)),
    lambda t, a, b: t.reciprocal(t.add(t.mul(b, b), 1.0)),
    lambda t, a, b: t.mul(a, b),
    lambda t, a, b: t.sub(a, b),
    lambda t, a, b: t.matmul(a, np.arange(9.0).reshape(3, 3) / 9),
    lambda t, a, b: t.sum(a, axis=1, keepdims=True),
    lambda t, a, b: t.sq_norm(a),
    lambda t, a, b: t.take(a, np.array([2, 0])),
    lambda t, a, b: t.concat([a, b]),
]


def _random_graph(ops):
    def graph(t, x):
        a, b = x, t.tanh(x)
        for op in ops:
            r = op(t, a, b)
            if r.shape == a.shape:
                a = r
            elif r.shape[-1] == 1:
                a = t.add(t.mul(a, r), b)
            else:
                a = t.add(b, t.scale(t.sum(r, axis=1, keepdims=True), 0.5))
        return t.sum(t.mul(a, a))

    return graph


def test_random_small_graphs_match_fd():
    rng = np.random.default_rng(4)
    for trial in range(50):
        graph = _random_graph([OPS[i] for i in rng.integers(len(OPS), size=3)])
        w = 0.5 * rng.standard_normal((4, 3))

        def f(x):
            t = dt.Tape()
            return float(graph(t, t.input(x)).value)

        tape = dt.Tape()
        xin = tape.input(w)
        g = tape.backward(graph(tape, xin))[xin.id]
        assert rel_err(g, fd_grad(f, w)) < 1e-4, trial


def test_every_op_is_exercised():
    tape = dt.Tape()
    x, b = tape.input(np.ones((4, 3))), tape.input(np.ones((4, 3)))
    assert {op(tape, x, b).op for op in OPS} >= {"tanh", "sigmoid", "softplus", "exp", "log", "reciprocal",
                                                   "mul", "sub", "matmul", "sum", "sq_norm", "take", "concat"}


def test_penalty_linear_closed_form():
    w = np.array([[0.3], [-1.2], [0.5]])
    params = {"W0": w, "b0": np.array([0.1])}
    net = dt.MLP((3, 1))
    x = np.random.default_rng(5).standard_normal((4, 3))
    pen, pg, g = dt.second_order_input_grad_penalty(net.build, params, x)
    nw = np.linalg.norm(w)
    assert pen == pytest.approx((nw - 1) ** 2, rel=1e-13)
    np.testing.assert_allclose(pg["W0"], 2 * (nw - 1) * w / nw, rtol=1e-12)
    np.testing.assert_allclose(pg["b0"], 0.0, atol=1e-15)
    np.testing.assert_allclose(g, np.tile(w.T, (4, 1)), rtol=1e-15)


def test_penalty_mlp_matches_fd():
    rng = np.random.default_rng(6)
    net = dt.MLP((3, 6, 5, 1), "softplus")
    params = net.init(rng, {})
    x = rng.standard_normal((7, 3))
    _, pg, _ = dt.second_order_input_grad_penalty(net.build, params, x)
    for name in params:
        def f(w, name=name):
            q = dict(params)
            q[name] = w
            return dt.second_order_input_grad_penalty(net.build, q, x)[0]
        assert rel_err(pg[name], fd_grad(f, params[name])) < 1e-4, name


def test_penalty_zero_network():
    net = dt.MLP((2, 3, 1), "softplus")
    params = {k: np.zeros_like(v) for k, v in net.init(np.random.default_rng(7), {}).items()}
    pen, pg, _ = dt.second_order_input_grad_penalty(net.build, params, np.ones((3, 2)))
    assert pen == 1.0
    assert all(np.all(v == 0) for v in pg.values())


def test_penalty_rejects_relu():
    net = dt.MLP((2, 3, 1), "relu")
    params = net.init(np.random.default_rng(8), {})
    with pytest.raises(UnsupportedOpError):
        dt.second_order_input_grad_penalty(net.build, params, np.ones((2, 2)))


def test_adam_zero_gradient():
    p = {"a": np.array([1.0, -2.0])}
    new = dt.adam_step(p, {"a": np.zeros(2)}, dt.AdamState())
    np.testing.assert_array_equal(new["a"], p["a"])


def test_adam_first_step_scalar():
    st = dt.AdamState(lr=0.1)
    new = dt.adam_step(np.array([1.0]), np.array([0.5]), st)
    # m_hat = 0.5, v_hat = 0.25
    assert new[0] == pytest.approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8), rel=1e-15)
    assert st.t == 1


def test_adam_deterministic_and_shape_check():
    rng = np.random.default_rng(9)
    p, g = {"w": rng.standard_normal((2, 3))}, {"w": rng.standard_normal((2, 3))}
    a = dt.adam_step(p, g, dt.AdamState())
    b = dt.adam_step(p, g, dt.AdamState())
    np.testing.assert_array_equal(a["w"], b["w"])
    with pytest.raises(InvalidArgumentError):
        dt.adam_step(p, {"w": np.zeros(3)}, dt.AdamState())


def test_value_and_input_grad_matches_numpy_forward():
    rng = np.random.default_rng(10)
    net = dt.MLP((4, 8, 1), "softplus")
    params = net.init(rng, {})
    x = rng.standard_normal((5, 4))
    vals, g = dt.value_and_input_grad(net.build, params, x)
    np.testing.assert_allclose(vals, net(x, params)[:, 0], rtol=1e-14)
    fd = fd_grad(lambda z: float(net(z, params).sum()), x)
    assert rel_err(g, fd) < 1e-6
