from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from superadjoint import scenarios
from superadjoint.errors import DimensionMismatch, ValueNotAnAtom
from superadjoint.problem import (
    Atoms,
    Box,
    Control,
    RelaxedControl,
    TimeGrid,
    check_cost_gradient,
    check_dynamics_jacobian,
    convex_combination,
    mean_field_value,
    relax,
)


def test_grid_nodes_are_uniform():
    g = TimeGrid(0.5, 2.5, 8)
    assert g.h == 0.25
    assert g.node_count == 9
    np.testing.assert_allclose(g.nodes, 0.5 + 0.25 * np.arange(9))
    assert np.all(np.diff(g.nodes) > 0)
    assert g.with_steps(16).h == 0.125


@pytest.mark.parametrize("t0, T, n", [(0, 0, 4), (1, 0, 4), (0, 1, 0), (0, 1, 2.5)])
def test_grid_rejects_bad_arguments(t0, T, n):
    with pytest.raises(ValueError):
        TimeGrid(t0, T, n)


@given(st.floats(0.0, 1.0), st.integers(1, 500))
def test_interval_index_brackets_time(t, n):
    g = TimeGrid(0.0, 1.0, n)
    k = g.interval_index(t)
    assert 0 <= k < n
    assert g.time(k) <= t + 1e-12
    assert t <= g.time(k + 1) + 1e-12


def test_interval_index_outside_span_raises():
    g = TimeGrid(0.0, 1.0, 4)
    assert g.interval_index(1.0) == 3
    with pytest.raises(ValueError):
        g.interval_index(1.5)


def test_box_and_atoms_validation():
    with pytest.raises(ValueError):
        Box([1.0], [0.0])
    with pytest.raises(DimensionMismatch):
        Box([0.0, 0.0], [1.0])
    with pytest.raises(ValueError):
        Atoms(np.empty((0, 1)))
    box = Box([-1, -2], [1, 2])
    assert box.dim == 2
    np.testing.assert_array_equal(box.center, [0, 0])
    assert box.contains([1 + 5e-13, -2])
    assert not box.contains([1.01, 0])
    atoms = Atoms([[-1.0], [1.0]])
    assert atoms.index_of([1.0]) == 1
    with pytest.raises(ValueNotAnAtom):
        atoms.index_of([0.5])


def test_control_shapes_and_readonly():
    g = TimeGrid(0, 1, 5)
    u = Control(g, np.arange(5.0))
    assert u.values.shape == (5, 1)
    with pytest.raises(ValueError):
        u.values[0, 0] = 3.0
    with pytest.raises(DimensionMismatch):
        Control(g, np.zeros(4))


def test_control_resampling_on_refined_grid():
    g = TimeGrid(0, 1, 4)
    u = Control(g, [[1.0], [2.0], [3.0], [4.0]])
    fine = u.on_grid(g.with_steps(8))
    np.testing.assert_array_equal(fine.values[:, 0], [1, 1, 2, 2, 3, 3, 4, 4])


def test_relax_constant_control_is_one_hot():
    g = TimeGrid(0, 1, 6)
    rc = relax(Control.constant(g, [-1.0]), [[-1.0], [1.0]])
    np.testing.assert_array_equal(rc.weights, np.tile([1.0, 0.0], (6, 1)))


def test_relax_alternating_control():
    g = TimeGrid(0, 1, 4)
    rc = relax(Control(g, [[-1.0], [1.0], [-1.0], [1.0]]), [[-1.0], [1.0]])
    np.testing.assert_array_equal(rc.weights, [[1, 0], [0, 1], [1, 0], [0, 1]])


def test_relax_rejects_missing_atom():
    g = TimeGrid(0, 1, 3)
    with pytest.raises(ValueNotAnAtom):
        relax(Control.constant(g, [0.3]), [[-1.0], [1.0]])


def test_relaxed_weights_validated():
    g = TimeGrid(0, 1, 2)
    with pytest.raises(ValueError):
        RelaxedControl(g, [[-1.0], [1.0]], [[0.6, 0.6], [0.5, 0.5]])
    with pytest.raises(ValueError):
        RelaxedControl(g, [[-1.0], [1.0]], [[1.5, -0.5], [0.5, 0.5]])
    with pytest.raises(DimensionMismatch):
        RelaxedControl(g, [[-1.0], [1.0]], [[1.0, 0.0]])


def _f_linear(t, x, u):
    return 2.0 * x + 3.0 * np.asarray(u)


def test_mean_field_value_examples():
    g = TimeGrid(0, 1, 2)
    atoms = [[-1.0], [1.0]]
    one_hot = RelaxedControl(g, atoms, [[0.0, 1.0], [0.0, 1.0]])
    np.testing.assert_allclose(mean_field_value(one_hot, 0.2, _f_linear, np.array([0.5])), [4.0])
    half = RelaxedControl(g, atoms, [[0.5, 0.5], [0.5, 0.5]])
    np.testing.assert_allclose(mean_field_value(half, 0.7, _f_linear, np.array([0.5])),
                               _f_linear(0.7, np.array([0.5]), np.array([0.0])))
    square = mean_field_value(half, 0.3, lambda t, x, u: np.asarray(u) ** 2, np.array([0.0]))
    np.testing.assert_allclose(square, [1.0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_relax_reproduces_ordinary_field(seed):
    rng = np.random.default_rng(seed)
    g = TimeGrid(0, 1, 7)
    atoms = np.array([[-1.0], [0.0], [1.0]])
    u = Control(g, atoms[rng.integers(0, 3, 7)])
    rc = relax(u, atoms)
    x = rng.standard_normal(1)
    for k in range(7):
        t = g.time(k)
        assert np.array_equal(mean_field_value(rc, t, _f_linear, x), u.apply(_f_linear, k, t, x))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 2**32 - 1))
def test_mean_field_value_linear_in_weights(lam, seed):
    rng = np.random.default_rng(seed)
    g = TimeGrid(0, 1, 1)
    atoms = [[-1.0], [0.5], [2.0]]
    w1, w2 = rng.dirichlet(np.ones(3), 2)
    f = lambda t, x, u: np.sin(x) * np.asarray(u) ** 2
    x = np.array([0.4])
    mix = RelaxedControl(g, atoms, [(1 - lam) * w1 + lam * w2])
    a = mean_field_value(RelaxedControl(g, atoms, [w1]), 0.5, f, x)
    b = mean_field_value(RelaxedControl(g, atoms, [w2]), 0.5, f, x)
    np.testing.assert_allclose(mean_field_value(mix, 0.5, f, x), (1 - lam) * a + lam * b, atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 2**32 - 1))
def test_convex_combination_is_the_weak_variation(eps, seed):
    rng = np.random.default_rng(seed)
    g = TimeGrid(0, 1, 5)
    box = Box([-1.0, -1.0], [1.0, 1.0])
    a = scenarios.random_block_control(g, box, rng, blocks=5)
    b = scenarios.random_block_control(g, box, rng, blocks=5)
    mix = convex_combination(a, b, eps)
    f = lambda t, x, u: np.asarray(u) * np.asarray(u) + x
    x = np.array([0.3, -0.2])
    for k in range(5):
        expect = (1 - eps) * f(0, x, a.values[k]) + eps * f(0, x, b.values[k])
        np.testing.assert_allclose(mix.apply(f, k, 0.0, x), expect, atol=1e-14)
    if isinstance(mix, RelaxedControl):
        np.testing.assert_allclose(mix.weights.sum(axis=1), 1.0, atol=1e-15)


def test_convex_combination_endpoints_are_identity():
    g = TimeGrid(0, 1, 3)
    a, b = Control.constant(g, [0.0]), Control.constant(g, [1.0])
    assert convex_combination(a, b, 0.0) is a
    assert convex_combination(a, b, 1.0) is b
    with pytest.raises(ValueError):
        convex_combination(a, b, 1.5)


def test_check_control_membership():
    p = scenarios.default_problem("linear-scalar", 10)
    p.check_control(Control.constant(p.horizon, [1.0]))
    with pytest.raises(ValueError):
        p.check_control(Control.constant(p.horizon, [1.5]))
    with pytest.raises(DimensionMismatch):
        p.check_control(Control.constant(TimeGrid(0, 1, 3), [0.0]))


@pytest.mark.parametrize("name", ["linear-scalar", "double-integrator", "bilinear", "van-der-pol"])
def test_shipped_callbacks_pass_validation(name, rng):
    p = scenarios.default_problem(name, 10)
    probes = rng.standard_normal((6, p.state_dim))
    ok, worst = check_cost_gradient(p, probes)
    assert ok, worst
    lo, hi = p.control_set.lower, p.control_set.upper
    ok, worst = check_dynamics_jacobian(p, probes, np.vstack([lo, hi, 0.5 * (lo + hi)]))
    assert ok, worst


def test_gradient_validation_flags_wrong_gradient(rng):
    import dataclasses

    p = scenarios.default_problem("van-der-pol", 10)
    bad = dataclasses.replace(p, cost_grad=lambda x: 1.01 * p.cost_grad(x))
    ok, worst = check_cost_gradient(bad, rng.standard_normal((4, 2)))
    assert not ok and worst > 1e-3


def test_control_csv(tmp_path):
    g = TimeGrid(0, 1, 2)
    Control(g, [[0.1, 2.0], [-1.0, 3.0]]).to_csv(tmp_path / "u.csv")
    lines = (tmp_path / "u.csv").read_text().splitlines()
    assert lines[0] == "t,u1,u2"
    assert [float(v) for v in lines[2].split(",")] == [0.5, -1.0, 3.0]
