from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import affine_flow, bilinear_flow, random_pair, rk4_reference
from superadjoint import scenarios
from superadjoint.errors import MissingHessian, NonFiniteState
from superadjoint.flow import (
    IntegrationCounter,
    hermite_midpoint,
    integrate_adjoint,
    integrate_flow,
    integrate_linearized,
    integrate_riccati,
    integrate_variational,
    pullback_batch,
)
from superadjoint.problem import Box, Control, ControlProblem, TimeGrid


def scalar_problem(a=-1.0, b=1.0, n_steps=100, x0=1.0, T=1.0, hess=True):
    grid = TimeGrid(0.0, T, n_steps)
    return ControlProblem(
        1, 1,
        lambda t, x, u: a * np.asarray(x) + b * np.asarray(u),
        lambda t, x, u: np.full(np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1]) + (1, 1), a),
        lambda x: 0.5 * np.sum(np.asarray(x) ** 2, axis=-1),
        lambda x: np.asarray(x, dtype=float),
        Box([-1.0], [1.0]), grid, [x0],
        cost_hess=(lambda x: np.eye(1)) if hess else None,
    )


def zero_field_problem(n_steps=10):
    grid = TimeGrid(0.0, 1.0, n_steps)
    return ControlProblem(
        2, 1,
        lambda t, x, u: np.zeros(np.broadcast_shapes(np.shape(x), np.shape(u)[:-1] + (2,))),
        lambda t, x, u: np.zeros(np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1]) + (2, 2)),
        lambda x: np.sum(np.asarray(x) ** 2, axis=-1),
        lambda x: 2 * np.asarray(x),
        Box([-1.0], [1.0]), grid, [0.3, -0.7],
        cost_hess=lambda x: 2 * np.eye(2),
    )


def test_zero_field_keeps_state():
    p = zero_field_problem()
    u = Control.constant(p.horizon, [0.5])
    traj = integrate_flow(p, u)
    np.testing.assert_array_equal(traj.states, np.tile([0.3, -0.7], (11, 1)))
    w = integrate_variational(p, u, traj, [1.0, 2.0])
    np.testing.assert_array_equal(w, np.tile([1.0, 2.0], (11, 1)))
    lam = integrate_adjoint(p, u, traj)
    np.testing.assert_array_equal(lam.states, np.tile([0.6, -1.4], (11, 1)))
    ric = integrate_riccati(p, u, traj, lam)
    np.testing.assert_array_equal(ric.matrices, np.tile(-2 * np.eye(2), (11, 1, 1)))


def test_pure_integrator_is_exact():
    p = scalar_problem(a=0.0, x0=0.0, n_steps=7)
    traj = integrate_flow(p, Control.constant(p.horizon, [1.0]))
    assert traj.final[0] == pytest.approx(1.0, abs=1e-15)


def test_exponential_decay_against_closed_form():
    p = scalar_problem(a=-1.0, b=0.0, n_steps=100)
    traj = integrate_flow(p, Control.constant(p.horizon, [0.0]))
    assert abs(traj.final[0] - np.exp(-1.0)) < 1e-9


def test_rk4_order_exponent():
    errs = []
    for n in (20, 40, 80):
        p = scalar_problem(a=-1.3, b=0.0, n_steps=n)
        traj = integrate_flow(p, Control.constant(p.horizon, [0.0]))
        errs.append(abs(traj.final[0] - np.exp(-1.3)))
    slopes = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(slopes >= 3.7), slopes


def test_flow_matches_independent_rk4_on_nonlinear_scenario():
    p = scenarios.default_problem("van-der-pol", 50)
    traj = integrate_flow(p, Control.constant(p.horizon, [0.3]))
    ref = rk4_reference(lambda t, x: p.dynamics(t, x, np.array([0.3])), p.x0, 0.0, 1.0, 50)
    np.testing.assert_allclose(traj.states, ref, rtol=0, atol=1e-14)


def test_linear_flow_against_matrix_exponential(rng):
    p = scenarios.default_problem("double-integrator", 200)
    u = scenarios.random_block_control(p.horizon, p.control_set, rng)
    traj = integrate_flow(p, u)
    exact = affine_flow([[0, 1], [0, 0]], [[0], [1]], p.x0, u.values, p.horizon.h)
    # polynomial solutions of degree <= 2 are integrated exactly
    np.testing.assert_allclose(traj.states, exact, atol=1e-13)


def test_bilinear_flow_against_matrix_exponential(rng):
    p = scenarios.default_problem("bilinear", 400)
    u = scenarios.random_block_control(p.horizon, p.control_set, rng)
    traj = integrate_flow(p, u)
    gens = np.stack([scenarios.ROTATION, scenarios.SQUEEZE])
    exact = bilinear_flow(gens, p.x0, u.values, p.horizon.h)
    assert np.abs(traj.states - exact).max() < 1e-9


@pytest.mark.parametrize("name", ["linear-scalar", "bilinear", "van-der-pol"])
def test_chain_rule_is_bitwise(name, rng):
    p = scenarios.default_problem(name, 60)
    u = scenarios.random_block_control(p.horizon, p.control_set, rng)
    full = integrate_flow(p, u)
    first = integrate_flow(p, u, stop=23)
    second = integrate_flow(p, u, x0=first.final, start=23)
    assert np.array_equal(second.states, full.states[23:])
    assert np.array_equal(first.states, full.states[:24])
    assert second.start == 23 and second.stop == 60


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_blow_up_raises():
    grid = TimeGrid(0.0, 1.0, 10)
    p = ControlProblem(1, 1, lambda t, x, u: np.asarray(x) ** 2 * 1e200,
                       lambda t, x, u: 2e200 * np.asarray(x)[..., None],
                       lambda x: np.sum(x, axis=-1), lambda x: np.ones_like(x),
                       Box([0.0], [1.0]), grid, [1e200])
    with pytest.raises(NonFiniteState):
        integrate_flow(p, Control.constant(grid, [0.0]))


def test_scalar_variational_adjoint_riccati_closed_forms():
    a = 0.7
    p = scalar_problem(a=a, b=0.0, n_steps=100)
    u = Control.constant(p.horizon, [0.0])
    traj = integrate_flow(p, u)
    t = p.horizon.nodes
    w = integrate_variational(p, u, traj, [2.0])
    np.testing.assert_allclose(w[:, 0], 2.0 * np.exp(a * t), rtol=0, atol=1e-9)
    g = 3.0
    lam = integrate_adjoint(p, u, traj, terminal=[g])
    np.testing.assert_allclose(lam.states[:, 0], g * np.exp(a * (1.0 - t)), atol=1e-9)
    ric = integrate_riccati(p, u, traj, lam, terminal=[[-1.5]])
    np.testing.assert_allclose(ric.matrices[:, 0, 0], -1.5 * np.exp(2 * a * (1.0 - t)), atol=1e-8)


def test_variational_matches_finite_differences(rng):
    p = scenarios.default_problem("van-der-pol", 200)
    u = scenarios.random_block_control(p.horizon, p.control_set, rng)
    traj = integrate_flow(p, u)
    w0 = rng.standard_normal(2)
    w = integrate_variational(p, u, traj, w0)
    eps = 1e-5
    plus = integrate_flow(p, u, x0=p.x0 + eps * w0).states
    minus = integrate_flow(p, u, x0=p.x0 - eps * w0).states
    fd = (plus - minus) / (2 * eps)
    assert np.abs(fd - w).max() <= 1e-5 * np.abs(w).max()


def test_variational_sub_span_and_matrix_columns(rng):
    p = scenarios.default_problem("van-der-pol", 40)
    u = scenarios.random_block_control(p.horizon, p.control_set, rng)
    traj = integrate_flow(p, u)
    W = integrate_variational(p, u, traj, np.eye(2), start=10, stop=30)
    assert W.shape == (21, 2, 2)
    col = integrate_variational(p, u, traj, [0.0, 1.0], start=10, stop=30)
    np.testing.assert_allclose(W[:, :, 1], col, atol=1e-15)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["van-der-pol", "bilinear", "double-integrator"]))
def test_adjoint_variational_pairing_is_constant(seed, name):
    rng = np.random.default_rng(seed)
    p = scenarios.default_problem(name, 80)
    u = scenarios.random_block_control(p.horizon, p.control_set, rng)
    traj = integrate_flow(p, u)
    w = integrate_variational(p, u, traj, rng.standard_normal(2))
    lam = integrate_adjoint(p, u, traj, terminal=rng.standard_normal(2)).states
    pairing = np.einsum("ka,ka->k", w, lam)
    assert np.abs(pairing - pairing[-1]).max() <= 1e-8 * max(1.0, abs(pairing[-1]))


def test_riccati_requires_hessian():
    p = scalar_problem(hess=False, n_steps=5)
    u = Control.constant(p.horizon, [0.0])
    traj = integrate_flow(p, u)
    with pytest.raises(MissingHessian):
        integrate_riccati(p, u, traj, integrate_adjoint(p, u, traj))


def test_riccati_is_symmetric(rng):
    p = scenarios.default_problem("van-der-pol", 100)
    u = scenarios.random_block_control(p.horizon, p.control_set, rng)
    traj = integrate_flow(p, u)
    ric = integrate_riccati(p, u, traj, integrate_adjoint(p, u, traj))
    assert np.abs(ric.matrices - np.swapaxes(ric.matrices, 1, 2)).max() <= 1e-10


def test_linearized_equals_zero_for_same_control(rng):
    p = scenarios.default_problem("van-der-pol", 30)
    u = scenarios.random_block_control(p.horizon, p.control_set, rng)
    traj = integrate_flow(p, u)
    assert np.array_equal(integrate_linearized(p, u, u, traj), np.zeros((31, 2)))


def test_linearized_zero_jacobian_is_quadrature():
    p = zero_field_problem(20)
    grid = p.horizon
    # field difference f(x, u) - f(x, u_ref) for f = (u, t u)
    q = ControlProblem(
        2, 1,
        lambda t, x, u: np.broadcast_to(np.concatenate([u, t * np.asarray(u)], axis=-1),
                                        np.broadcast_shapes(np.shape(x), np.shape(u)[:-1] + (2,))),
        p.dynamics_jac_x, p.cost, p.cost_grad, p.control_set, grid, p.x0,
    )
    u_ref = Control.constant(grid, [0.0])
    u = Control(grid, np.linspace(-1, 1, 20))
    y = integrate_linearized(q, u_ref, u, integrate_flow(q, u_ref))
    t = grid.nodes
    vals = u.values[:, 0]
    expect0 = np.concatenate([[0.0], np.cumsum(vals * grid.h)])
    expect1 = np.concatenate([[0.0], np.cumsum(vals * 0.5 * (t[1:] ** 2 - t[:-1] ** 2))])
    np.testing.assert_allclose(y[:, 0], expect0, atol=1e-12)
    np.testing.assert_allclose(y[:, 1], expect1, atol=1e-12)


def test_linearized_matches_perturbed_resimulation(rng):
    from superadjoint.problem import convex_combination

    p = scenarios.default_problem("van-der-pol", 200)
    u_ref, u = random_pair(p, 7)
    traj = integrate_flow(p, u_ref)
    y = integrate_linearized(p, u_ref, u, traj)
    eps = 1e-4
    moved = integrate_flow(p, convex_combination(u_ref, u, eps)).states
    err = np.abs((moved - traj.states) / eps - y).max()
    assert err <= 1e-3 * np.abs(y).max()


def test_hermite_midpoint_is_exact_for_cubics():
    f = lambda t: 1 + 2 * t - 3 * t**2 + 0.5 * t**3
    df = lambda t: 2 - 6 * t + 1.5 * t**2
    h = 0.4
    assert hermite_midpoint(f(0.0), f(h), df(0.0), df(h), h) == pytest.approx(f(h / 2), abs=1e-15)


def test_counter_counts_full_horizon_passes():
    p = scalar_problem(n_steps=40)
    u = Control.constant(p.horizon, [0.0])
    c = IntegrationCounter()
    traj = integrate_flow(p, u, counter=c)
    integrate_flow(p, u, start=30, counter=c)
    integrate_adjoint(p, u, traj, counter=c)
    assert c.passes == pytest.approx(2.25)


def test_pullback_batch_matches_individual_queries(rng):
    p = scenarios.default_problem("van-der-pol", 50)
    u = scenarios.random_block_control(p.horizon, p.control_set, rng)
    starts = np.array([37, 0, 12, 12, 50])
    states = rng.standard_normal((5, 2))

    def field(k, t, X):
        return p.field(u, k, t, X)

    def action(k, t, X):
        J = p.jacobian(u, k, t, X)
        return lambda Y: np.einsum("...ba,...b->...a", J, Y)

    def terminal(X):
        return p.cost(X), p.cost_grad(X)

    vals, grads = pullback_batch(p.horizon, starts, states, field, action, terminal, memory_floats=64)
    for i, (s, x) in enumerate(zip(starts, states)):
        traj = integrate_flow(p, u, x0=x, start=s)
        assert vals[i] == pytest.approx(float(p.cost(traj.final)), abs=1e-14)
        lam = integrate_adjoint(p, u, traj)
        np.testing.assert_allclose(grads[i], lam.states[0], atol=1e-13)


def test_trajectory_csv(tmp_path):
    p = scenarios.default_problem("double-integrator", 4)
    traj = integrate_flow(p, Control.constant(p.horizon, [1.0]))
    traj.to_csv(tmp_path / "x.csv")
    lines = (tmp_path / "x.csv").read_text().splitlines()
    assert lines[0] == "t,x1,x2"
    assert len(lines) == 6
    back = np.array([[float(v) for v in line.split(",")] for line in lines[1:]])
    assert np.array_equal(back[:, 1:], traj.states)
