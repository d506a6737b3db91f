"""Increment formulas, weak variations and the maximum-principle residual."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from ._io import write_csv, write_json
from .adjoint import SuperAdjoint
from .flow import (
    IntegrationCounter,
    _coefficients,
    hamiltonian_hessian,
    hermite_midpoint,
    integrate_adjoint,
    integrate_flow,
    integrate_linearized,
    integrate_riccati,
)
from .problem import AnyControl, Atoms, Box, ControlProblem, ControlSet, RelaxedControl

__all__ = [
    "hamiltonian",
    "minimize_hamiltonian",
    "minimize_over",
    "IncrementReport",
    "PmpReport",
    "exact_increment",
    "first_variation",
    "second_variation",
    "pmp_residual",
    "interval_trapezoid",
]

GRID_POINTS = 33
REFINEMENTS = 10


def hamiltonian(problem: ControlProblem, t: float, x, psi, u, weights=None) -> float:
    """``psi . f(t, x, u)``; with ``weights`` the rows of ``u`` are atoms to average."""
    u = np.asarray(u, dtype=float)
    if weights is None:
        return float(np.dot(psi, problem.dynamics(t, x, u)))
    vals = np.asarray(problem.dynamics(t, x, np.atleast_2d(u))) @ psi
    return float(np.dot(weights, vals))


def _box_affine(h_of: Callable, box: Box, scale_floor: float = 1e-300):
    """Probe ``h_of`` for affinity on ``box``; returns ``(is_affine, center_value, slopes)``."""
    c = box.center
    r = 0.5 * (box.upper - box.lower)
    m = c.size
    probes = [c]
    for i in range(m):
        e = np.zeros(m)
        e[i] = r[i]
        probes += [c + e, c - e]
    signs = np.where(np.arange(m) % 2 == 0, 1.0, -1.0)
    probes.append(c + signs * r)
    vals = h_of(np.array(probes))
    hc = vals[0]
    plus, minus = vals[1:2 * m + 1:2], vals[2:2 * m + 1:2]
    scale = max(float(np.max(np.abs(vals))), scale_floor)
    curv = np.abs(plus + minus - 2.0 * hc)
    with np.errstate(invalid="ignore", divide="ignore"):
        slopes = np.where(r > 0, (plus - minus) / np.where(r > 0, 2.0 * r, 1.0), 0.0)
    diag_pred = hc + np.dot(slopes, signs * r)
    cross = abs(vals[-1] - diag_pred)
    affine = bool(np.all(curv <= 1e-10 * scale) and cross <= 1e-10 * scale)
    return affine, slopes, r


def _grid_search(h_of: Callable, box: Box):
    lo, hi = box.lower.copy(), box.upper.copy()
    m = lo.size
    best = None
    for level in range(REFINEMENTS + 1):
        axes = [np.linspace(lo[i], hi[i], GRID_POINTS) for i in range(m)]
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, m)
        vals = h_of(mesh)
        j = int(np.argmin(vals))
        if best is None or vals[j] < best[1]:
            best = (mesh[j].copy(), float(vals[j]))
        # halve the search window around the incumbent
        half = 0.25 * (hi - lo)
        lo = np.maximum(box.lower, best[0] - half)
        hi = np.minimum(box.upper, best[0] + half)
    return best


def minimize_over(h_of: Callable, control_set: ControlSet, reference=None, tol: float = 1e-12):
    """Minimize ``h_of(U) -> (K,)`` over a control set.

    Atoms are searched exhaustively.  On a box, an affine ``h_of`` is minimized
    at a vertex (bang-bang), with components whose switching coefficient
    vanishes taken from ``reference`` or else from the box center; otherwise a
    grid search with successive window halving is used.  If ``reference`` is
    within ``tol`` of the minimum it is returned instead, which keeps
    extremals fixed.

    Returns ``(u_star, h_star)``.
    """
    if isinstance(control_set, Atoms):
        vals = h_of(control_set.atoms)
        j = int(np.argmin(vals))
        u, hmin = control_set.atoms[j].copy(), float(vals[j])
    else:
        affine, slopes, r = _box_affine(h_of, control_set)
        if affine:
            u = control_set.center.copy()
            if reference is not None:
                fill = np.asarray(reference, dtype=float)
            else:
                fill = control_set.center
            for i in range(u.size):
                if abs(slopes[i]) * r[i] <= tol:
                    u[i] = fill[i]
                elif slopes[i] > 0:
                    u[i] = control_set.lower[i]
                else:
                    u[i] = control_set.upper[i]
            hmin = float(h_of(u[None, :])[0])
        else:
            u, hmin = _grid_search(h_of, control_set)
    if reference is not None:
        ref = np.asarray(reference, dtype=float)
        href = float(h_of(ref[None, :])[0])
        if href - hmin <= tol:
            return ref.copy(), href
    return u, hmin


def minimize_hamiltonian(problem: ControlProblem, t: float, x, psi, reference=None,
                         tol: float = 1e-12):
    """Pointwise minimizer of ``u -> psi . f(t, x, u)`` over the control set.

    Returns ``(u_star, h_star)``; see :func:`minimize_over` for tie handling.
    """
    x = np.asarray(x, dtype=float)
    psi = np.asarray(psi, dtype=float)

    def h_of(U):
        return problem.dynamics(t, x, U) @ psi

    return minimize_over(h_of, problem.control_set, reference, tol)


def interval_trapezoid(h: float, left, right) -> float:
    """Sum of per-interval trapezoids ``h/2 (left_k + right_k)``."""
    return float(0.5 * h * (np.sum(left) + np.sum(right)))


@dataclass
class IncrementReport:
    """Predicted and realized cost change between a reference and a target control."""

    predicted: float
    realized: float
    abs_gap: float
    grid_h: float
    reference_cost: float = 0.0
    target_cost: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path) -> None:
        write_json(path, self.to_dict())

    def to_csv(self, path) -> None:
        d = self.to_dict()
        write_csv(path, list(d), [list(d.values())])


@dataclass
class PmpReport:
    """Integrated gap ``H(x, p, u_ref) - min_u H(x, p, u)`` along the reference.

    Per-node arrays refer to the left node ``t_k`` of every interval.
    """

    residual: float
    worst_node: int
    worst_gap: float
    times: np.ndarray = field(repr=False)
    h_ref: np.ndarray = field(repr=False)
    h_min: np.ndarray = field(repr=False)
    minimizers: np.ndarray = field(repr=False)

    @property
    def minimizer_per_node(self) -> np.ndarray:
        return self.minimizers

    @property
    def gaps(self) -> np.ndarray:
        return self.h_ref - self.h_min

    def to_dict(self) -> dict:
        return {
            "residual": self.residual,
            "worst_node": self.worst_node,
            "worst_gap": self.worst_gap,
            "times": self.times,
            "h_ref": self.h_ref,
            "h_min": self.h_min,
            "minimizers": self.minimizers,
        }

    def to_json(self, path) -> None:
        write_json(path, self.to_dict())

    def to_csv(self, path) -> None:
        m = self.minimizers.shape[1]
        header = ["t", "H_ref", "H_min"] + [f"u{i + 1}" for i in range(m)]
        rows = ([t, a, b, *u] for t, a, b, u in zip(self.times, self.h_ref, self.h_min, self.minimizers))
        write_csv(path, header, rows)


def _field_difference(problem, target, reference, k, t, x):
    return problem.field(target, k, t, x) - problem.field(reference, k, t, x)


def _pairing_integral(problem, target, reference, states, covectors) -> float:
    """Trapezoid of ``covector . (f(x, u_target) - f(x, u_ref))`` with interval-k controls."""
    grid = problem.horizon
    left = np.empty(grid.n_steps)
    right = np.empty(grid.n_steps)
    for k in range(grid.n_steps):
        t0, t1 = grid.time(k), grid.time(k) + grid.h
        left[k] = covectors[k] @ _field_difference(problem, target, reference, k, t0, states[k])
        right[k] = covectors[k + 1] @ _field_difference(problem, target, reference, k, t1, states[k + 1])
    return interval_trapezoid(grid.h, left, right)


def exact_increment(problem: ControlProblem, reference: AnyControl, target: AnyControl,
                    method: str = "auto", counter: Optional[IntegrationCounter] = None
                    ) -> IncrementReport:
    """Compare the exact increment formula with the realized cost change.

    The prediction integrates the reference super-adjoint gradient, taken along
    the *target* trajectory, against the field difference.
    """
    sa = SuperAdjoint(problem, reference, method=method, counter=counter)
    x_ref = integrate_flow(problem, reference, counter=counter)
    x_new = integrate_flow(problem, target, counter=counter)
    psi = sa.along(x_new)
    predicted = _pairing_integral(problem, target, reference, x_new.states, psi)
    j_ref = float(problem.cost(x_ref.final))
    j_new = float(problem.cost(x_new.final))
    realized = j_new - j_ref
    return IncrementReport(predicted, realized, abs(predicted - realized), problem.horizon.h,
                           j_ref, j_new)


def _simpson_pairing(problem, target, reference, traj, costate) -> float:
    """Per-interval Simpson rule with Hermite midpoints of state and costate."""
    grid = problem.horizon
    total = 0.0
    for k in range(grid.n_steps):
        ts, xs, (a0, _, a1) = _coefficients(problem, reference, traj, k)
        p0, p1 = costate.at(k), costate.at(k + 1)
        pm = hermite_midpoint(p0, p1, -a0.T @ p0, -a1.T @ p1, grid.h)
        g = [psi @ _field_difference(problem, target, reference, k, t, x)
             for t, x, psi in zip(ts, xs, (p0, pm, p1))]
        total += grid.h / 6.0 * (g[0] + 4.0 * g[1] + g[2])
    return float(total)


def first_variation(problem: ControlProblem, reference: AnyControl, target: AnyControl,
                    counter: Optional[IntegrationCounter] = None, trajectory=None,
                    costate=None, quadrature: str = "trapezoid") -> float:
    """Directional derivative of the cost along ``u_ref + eps (u - u_ref)`` at ``eps = 0``.

    ``quadrature="simpson"`` adds Hermite midpoints on every interval, which
    lowers the quadrature error from ``O(h^2)`` to ``O(h^4)``.
    """
    traj = trajectory if trajectory is not None else integrate_flow(problem, reference, counter=counter)
    p = costate if costate is not None else integrate_adjoint(problem, reference, traj, counter=counter)
    if quadrature == "simpson":
        return _simpson_pairing(problem, target, reference, traj, p)
    if quadrature != "trapezoid":
        raise ValueError(f"unknown quadrature {quadrature!r}")
    return _pairing_integral(problem, target, reference, traj.states, p.states)


def second_variation(problem: ControlProblem, reference: AnyControl, target: AnyControl,
                     counter: Optional[IntegrationCounter] = None,
                     quadrature: str = "trapezoid") -> float:
    """Coefficient of ``eps^2`` in the cost along ``u_ref + eps (u - u_ref)``.

    Uses the linearized response ``y`` and the super-adjoint Hessian ``Q``
    from the Riccati equation::

        V2 = int (Q^T df + D_x df^T p) . y dt,   df = f(x, u) - f(x, u_ref)

    which is half the second derivative of the cost in ``eps``.  With
    ``quadrature="simpson"`` every factor is also evaluated at Hermite
    midpoints.
    """
    if quadrature not in ("trapezoid", "simpson"):
        raise ValueError(f"unknown quadrature {quadrature!r}")
    grid = problem.horizon
    h = grid.h
    traj = integrate_flow(problem, reference, counter=counter)
    p = integrate_adjoint(problem, reference, traj, counter=counter)
    ric = integrate_riccati(problem, reference, traj, p, counter=counter)
    y = integrate_linearized(problem, reference, target, traj, counter=counter)

    def integrand(k, t, x, q, psi, yv):
        df = _field_difference(problem, target, reference, k, t, x)
        dj = problem.jacobian(target, k, t, x) - problem.jacobian(reference, k, t, x)
        return (q.T @ df + dj.T @ psi) @ yv

    left = np.empty(grid.n_steps)
    right = np.empty(grid.n_steps)
    mid = np.empty(grid.n_steps)
    for k in range(grid.n_steps):
        ts, xs, amats = _coefficients(problem, reference, traj, k)
        ends = ((k, ts[0], xs[0], amats[0]), (k + 1, ts[2], xs[2], amats[2]))
        left[k], right[k] = (integrand(k, t, x, -ric.at(node), p.at(node), y[node])
                             for node, t, x, _ in ends)
        if quadrature == "trapezoid":
            continue
        rates = []
        for node, t, x, a in ends:
            P, psi = ric.at(node), p.at(node)
            S = hamiltonian_hessian(problem, reference, k, t, x, psi)
            dy = a @ y[node] + _field_difference(problem, target, reference, k, t, x)
            rates.append((-a.T @ P - P @ a + S, -a.T @ psi, dy))
        Pm = hermite_midpoint(ric.at(k), ric.at(k + 1), rates[0][0], rates[1][0], h)
        pm = hermite_midpoint(p.at(k), p.at(k + 1), rates[0][1], rates[1][1], h)
        ym = hermite_midpoint(y[k], y[k + 1], rates[0][2], rates[1][2], h)
        mid[k] = integrand(k, ts[1], xs[1], -Pm, pm, ym)
    if quadrature == "simpson":
        return float(h / 6.0 * np.sum(left + 4.0 * mid + right))
    return interval_trapezoid(h, left, right)


def _reference_value(reference: AnyControl, k: int):
    if isinstance(reference, RelaxedControl):
        return None
    return reference.values[k]


def pmp_residual(problem: ControlProblem, reference: AnyControl,
                 counter: Optional[IntegrationCounter] = None) -> PmpReport:
    """Integrated Hamiltonian gap of ``reference`` along its own extremal pair."""
    grid = problem.horizon
    traj = integrate_flow(problem, reference, counter=counter)
    p = integrate_adjoint(problem, reference, traj, counter=counter)

    def hamiltonians(k, t, node):
        x, psi = traj.at(node), p.at(node)
        h_ref = float(psi @ problem.field(reference, k, t, x))
        u, h_min = minimize_hamiltonian(problem, t, x, psi, _reference_value(reference, k))
        return h_ref, min(h_min, h_ref), u

    return _residual_report(grid, problem.control_dim, hamiltonians)


def _residual_report(grid, control_dim: int, hamiltonians) -> PmpReport:
    """Assemble a :class:`PmpReport` from ``hamiltonians(k, t, node) -> (H_ref, H_min, argmin)``."""
    n = grid.n_steps
    h_ref = np.empty(n)
    h_min = np.empty(n)
    right = np.empty(n)
    mins = np.empty((n, control_dim))
    for k in range(n):
        h_ref[k], h_min[k], mins[k] = hamiltonians(k, grid.time(k), k)
        a, b, _ = hamiltonians(k, grid.time(k) + grid.h, k + 1)
        right[k] = a - b
    left = h_ref - h_min
    worst = int(np.argmax(left))
    return PmpReport(
        residual=interval_trapezoid(grid.h, left, right),
        worst_node=worst,
        worst_gap=float(left[worst]),
        times=grid.nodes[:-1].copy(),
        h_ref=h_ref,
        h_min=h_min,
        minimizers=mins,
    )
