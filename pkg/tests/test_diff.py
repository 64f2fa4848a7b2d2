import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from geodesic_fields.diff import ScalarProgram, flatten, grad_input, grad_params, hessian_input, safe_norm, unflatten_like
from geodesic_fields.nes import Mlp, mlp_forward


def mlp_program(seed=0, sizes=(3, 16, 16, 16, 1), activation="tanh"):
    net = Mlp.init(list(sizes), seed, activation)

    def fn(params, x):
        return mlp_forward(params, x, activation)

    return ScalarProgram(fn, net.params)


def fd_gradient(f, x, h):
    x = np.asarray(x, float)
    return np.array([(f(x + e) - f(x - e)) / (2 * h) for e in np.eye(len(x)) * h])


def test_product_gradient_and_hessian():
    prog = ScalarProgram(lambda p, x: x[0] * x[1])
    assert np.array_equal(grad_input(prog, [2.0, 3.0]), [3.0, 2.0])
    assert np.array_equal(hessian_input(prog, [2.0, 3.0]), [[0.0, 1.0], [1.0, 0.0]])


def test_square_hessian():
    prog = ScalarProgram(lambda p, x: x[0] ** 2)
    assert hessian_input(prog, [1.7, -0.2])[0, 0] == 2.0


def test_affine_gradient_is_weight_row():
    w = np.array([0.5, -2.0, 3.0])
    prog = ScalarProgram(lambda p, x: p["w"] @ x + p["b"], {"w": jnp.asarray(w), "b": jnp.asarray(1.0)})
    for x in np.random.default_rng(0).normal(size=(5, 3)):
        assert np.array_equal(grad_input(prog, x), w)


def test_grad_params_examples():
    prog = ScalarProgram(lambda p, x: p["w"] * x[0], {"w": jnp.asarray(1.3)})
    assert grad_params(prog, [5.0])[0] == 5.0
    bias = ScalarProgram(lambda p, x: jnp.sum(x) + p["b"], {"b": jnp.asarray(0.2)})
    assert grad_params(bias, [1.0, 2.0])[0] == 1.0


@pytest.mark.parametrize("activation", ["tanh", "softplus", "sin"])
def test_mlp_gradient_matches_fd(activation):
    prog = mlp_program(1, activation=activation)
    for x in np.random.default_rng(2).uniform(-2, 2, (10, 3)):
        g = grad_input(prog, x)
        fd = fd_gradient(prog, x, 1e-6)
        assert np.linalg.norm(g - fd) / np.linalg.norm(g) < 1e-6


def test_mlp_hessian_matches_fd_of_gradient():
    prog = mlp_program(3)
    for x in np.random.default_rng(4).uniform(-2, 2, (10, 3)):
        H = hessian_input(prog, x)
        fd = np.stack([(grad_input(prog, x + e) - grad_input(prog, x - e)) / 2e-4 for e in np.eye(3) * 1e-4])
        assert np.linalg.norm(H - fd) / np.linalg.norm(H) < 1e-4
        assert np.max(np.abs(H - H.T)) < 1e-9


def test_parameter_gradient_of_loss_matches_fd():
    prog = mlp_program(5, sizes=(2, 8, 8, 1))
    xs = np.random.default_rng(6).normal(size=(4, 2))

    def loss(params, x):
        return sum((mlp_forward(params, jnp.asarray(xi), "tanh") - 0.3) ** 2 for xi in xs) * jnp.sum(x)

    lp = ScalarProgram(loss, prog.params)
    g = grad_params(lp, [1.0])
    flat = flatten(lp.params)
    rng = np.random.default_rng(7)
    idx = rng.choice(len(flat), 20, replace=False)
    h = 1e-6
    for i in idx:
        e = np.zeros_like(flat)
        e[i] = h
        up = ScalarProgram(loss, unflatten_like(lp.params, flat + e))([1.0])
        dn = ScalarProgram(loss, unflatten_like(lp.params, flat - e))([1.0])
        fd = (up - dn) / (2 * h)
        assert abs(g[i] - fd) <= 1e-5 * max(abs(g[i]), 1e-3)


def test_flatten_round_trip():
    prog = mlp_program(0)
    flat = flatten(prog.params)
    back = unflatten_like(prog.params, flat)
    assert np.array_equal(flatten(back), flat)


vec3 = arrays(np.float64, 3, elements=st.floats(-2, 2))


@settings(max_examples=25, deadline=None)
@given(vec3, st.floats(-3, 3), st.floats(-3, 3))
def test_linearity(x, a, b):
    f = mlp_program(0)
    g = mlp_program(1)
    combo = ScalarProgram(lambda p, x: a * mlp_forward(p[0], x) + b * mlp_forward(p[1], x), (f.params, g.params))
    lhs = grad_input(combo, x)
    rhs = a * grad_input(f, x) + b * grad_input(g, x)
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(vec3)
def test_chain_rule(x):
    inner = mlp_program(2)
    outer = ScalarProgram(lambda p, x: jnp.sin(mlp_forward(p, x)), inner.params)
    expect = np.cos(inner(x)) * grad_input(inner, x)
    assert np.allclose(grad_input(outer, x), expect, rtol=1e-12, atol=1e-14)


def test_determinism():
    prog = mlp_program(4)
    x = [0.3, -0.1, 1.2]
    assert np.array_equal(grad_input(prog, x), grad_input(prog, x))
    assert np.array_equal(hessian_input(prog, x), hessian_input(prog, x))


def test_safe_norm_gradient_at_origin_is_finite():
    prog = ScalarProgram(lambda p, x: safe_norm(x))
    assert np.all(grad_input(prog, [0.0, 0.0]) == 0)
    assert np.allclose(grad_input(prog, [3.0, 4.0]), [0.6, 0.8])
