"""Fixed-step RK4 integrators for the state, variational, adjoint and Riccati equations.

All integrators run on the problem's uniform grid.  Step ``k`` always uses the
interval-``k`` control and the stage times ``t_k, t_k + h/2, t_k + h`` with
``t_k = t0 + k*h``, so composing two partial flows reproduces the full flow
bit for bit.

The linear equations (variational, adjoint, Riccati, linearized) evaluate their
coefficients at the grid nodes and at a cubic Hermite midpoint of the stored
state path.  The forward variational step and the backward adjoint step then
use transposed coefficient sets, which makes the discrete pairing ``p.w``
invariant up to roundoff.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from ._io import write_csv
from .errors import DimensionMismatch, MissingHessian, NonFiniteState
from .problem import AnyControl, ControlProblem, TimeGrid

__all__ = [
    "IntegrationCounter",
    "Trajectory",
    "Costate",
    "RiccatiPath",
    "integrate_flow",
    "integrate_variational",
    "integrate_adjoint",
    "integrate_riccati",
    "integrate_linearized",
    "hamiltonian_hessian",
    "hermite_midpoint",
    "pullback_batch",
]


@dataclass
class IntegrationCounter:
    """Counts integrator work in full-horizon pass equivalents.

    One trajectory integrated over ``s`` of the ``n`` grid steps adds ``s/n``.
    A matrix-valued pass (several columns at once) counts like one trajectory.
    """

    passes: float = 0.0

    def add(self, steps: float, n_steps: int) -> None:
        self.passes += float(steps) / float(n_steps)


def _count(counter: Optional[IntegrationCounter], steps: float, n_steps: int) -> None:
    if counter is not None:
        counter.add(steps, n_steps)


def _finite(arr, what: str, k: int) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteState(f"non-finite {what} at step {k}")


def _rk4(g0: Callable, gm: Callable, g1: Callable, y, h: float):
    """One classical RK4 step with the three stage right-hand sides frozen in time."""
    k1 = g0(y)
    k2 = gm(y + 0.5 * h * k1)
    k3 = gm(y + 0.5 * h * k2)
    k4 = g1(y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def hermite_midpoint(x0, x1, f0, f1, h: float):
    """Cubic Hermite interpolant of a path at the middle of a step."""
    return 0.5 * (x0 + x1) + 0.125 * h * (f0 - f1)


def _stage_times(grid: TimeGrid, k: int):
    t0 = grid.time(k)
    return t0, t0 + 0.5 * grid.h, t0 + grid.h


@dataclass(frozen=True, eq=False)
class Trajectory:
    """State path on grid nodes ``start .. start + len(states) - 1``."""

    grid: TimeGrid
    states: np.ndarray
    start: int = 0

    @property
    def stop(self) -> int:
        return self.start + self.states.shape[0] - 1

    @property
    def times(self) -> np.ndarray:
        return self.grid.nodes[self.start:self.stop + 1]

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def at(self, k: int) -> np.ndarray:
        if not self.start <= k <= self.stop:
            raise IndexError(f"node {k} outside trajectory span [{self.start}, {self.stop}]")
        return self.states[k - self.start]

    def to_csv(self, path, prefix: str = "x") -> None:
        n = self.states.shape[1]
        header = ["t"] + [f"{prefix}{i + 1}" for i in range(n)]
        write_csv(path, header, ([t, *row] for t, row in zip(self.times, self.states)))


@dataclass(frozen=True, eq=False)
class Costate(Trajectory):
    """Adjoint path; same layout as :class:`Trajectory`."""

    def to_csv(self, path, prefix: str = "p") -> None:
        super().to_csv(path, prefix)


@dataclass(frozen=True, eq=False)
class RiccatiPath:
    """Symmetric matrices on the grid nodes (``matrices[k]`` at ``t_k``)."""

    grid: TimeGrid
    matrices: np.ndarray

    def at(self, k: int) -> np.ndarray:
        return self.matrices[k]


def _check_state(problem: ControlProblem, x) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape[-1] != problem.state_dim:
        raise DimensionMismatch(f"state must have {problem.state_dim} components")
    return x


def integrate_flow(problem: ControlProblem, control: AnyControl, x0=None, start: int = 0,
                   stop: Optional[int] = None, counter: Optional[IntegrationCounter] = None
                   ) -> Trajectory:
    """Integrate ``x' = f(t, x, u)`` from node ``start`` to node ``stop``.

    ``x0`` defaults to the problem's initial state and may carry leading batch
    axes, in which case ``states`` has shape ``(nodes, ..., n)``.
    """
    grid = problem.horizon
    if control.grid != grid:
        raise DimensionMismatch("control grid differs from the problem horizon")
    stop = grid.n_steps if stop is None else stop
    if not 0 <= start <= stop <= grid.n_steps:
        raise ValueError(f"need 0 <= start <= stop <= {grid.n_steps}")
    x = _check_state(problem, problem.x0 if x0 is None else x0)
    out = np.empty((stop - start + 1,) + x.shape)
    out[0] = x
    h = grid.h
    for k in range(start, stop):
        t0, tm, t1 = _stage_times(grid, k)
        x = _rk4(
            lambda y: problem.field(control, k, t0, y),
            lambda y: problem.field(control, k, tm, y),
            lambda y: problem.field(control, k, t1, y),
            x, h,
        )
        _finite(x, "state", k)
        out[k - start + 1] = x
    _count(counter, (stop - start) * max(1, int(np.prod(x.shape[:-1]))), grid.n_steps)
    return Trajectory(grid, out, start)


def _coefficients(problem: ControlProblem, control: AnyControl, traj: Trajectory, k: int):
    """Jacobians at the step start, Hermite midpoint and step end of interval ``k``."""
    grid = problem.horizon
    t0, tm, t1 = _stage_times(grid, k)
    x0, x1 = traj.at(k), traj.at(k + 1)
    f0 = problem.field(control, k, t0, x0)
    f1 = problem.field(control, k, t1, x1)
    xm = hermite_midpoint(x0, x1, f0, f1, grid.h)
    a0 = problem.jacobian(control, k, t0, x0)
    am = problem.jacobian(control, k, tm, xm)
    a1 = problem.jacobian(control, k, t1, x1)
    return (t0, tm, t1), (x0, xm, x1), (a0, am, a1)


def integrate_variational(problem: ControlProblem, control: AnyControl, trajectory: Trajectory,
                          w0, start: Optional[int] = None, stop: Optional[int] = None,
                          counter: Optional[IntegrationCounter] = None) -> np.ndarray:
    """Integrate ``w' = D_x f(t, x(t), u) w`` along ``trajectory``.

    ``w0`` is a vector or an ``(n, r)`` matrix of columns.  Returns the values
    on nodes ``start .. stop``.
    """
    start = trajectory.start if start is None else start
    stop = trajectory.stop if stop is None else stop
    w = np.asarray(w0, dtype=float).copy()
    if w.shape[0] != problem.state_dim:
        raise DimensionMismatch("tangent vector has the wrong length")
    out = np.empty((stop - start + 1,) + w.shape)
    out[0] = w
    h = problem.horizon.h
    for k in range(start, stop):
        _, _, (a0, am, a1) = _coefficients(problem, control, trajectory, k)
        w = _rk4(lambda y: a0 @ y, lambda y: am @ y, lambda y: a1 @ y, w, h)
        _finite(w, "tangent", k)
        out[k - start + 1] = w
    _count(counter, stop - start, problem.horizon.n_steps)
    return out


def integrate_adjoint(problem: ControlProblem, control: AnyControl, trajectory: Trajectory,
                      terminal=None, counter: Optional[IntegrationCounter] = None) -> Costate:
    """Integrate ``p' = -D_x f^T p`` backward from ``trajectory.stop``.

    The terminal value defaults to ``cost_grad`` at the final state.
    """
    p = np.asarray(problem.cost_grad(trajectory.final) if terminal is None else terminal,
                   dtype=float).copy()
    if p.shape[0] != problem.state_dim:
        raise DimensionMismatch("terminal costate has the wrong length")
    count = trajectory.states.shape[0]
    out = np.empty((count,) + p.shape)
    out[-1] = p
    h = problem.horizon.h
    for k in range(trajectory.stop - 1, trajectory.start - 1, -1):
        _, _, (a0, am, a1) = _coefficients(problem, control, trajectory, k)
        p = _rk4(lambda y: a1.T @ y, lambda y: am.T @ y, lambda y: a0.T @ y, p, h)
        _finite(p, "costate", k)
        out[k - trajectory.start] = p
    _count(counter, count - 1, problem.horizon.n_steps)
    return Costate(problem.horizon, out, trajectory.start)


def hamiltonian_hessian(problem: ControlProblem, control: AnyControl, k: int, t: float, x, p,
                        rel_step: float = 1e-5) -> np.ndarray:
    """``sum_i p_i D_x^2 f^i`` by central differences of the Jacobian, symmetrized."""
    n = problem.state_dim
    d = rel_step * (1.0 + np.linalg.norm(x))
    shifts = d * np.eye(n)
    jp = problem.jacobian(control, k, t, x + shifts)
    jm = problem.jacobian(control, k, t, x - shifts)
    # dj[j, i, b] = d^2 f^i / dx_b dx_j
    dj = (jp - jm) / (2.0 * d)
    s = np.einsum("i,jib->bj", p, dj)
    return 0.5 * (s + s.T)


def integrate_riccati(problem: ControlProblem, control: AnyControl, trajectory: Trajectory,
                      costate: Costate, terminal=None,
                      counter: Optional[IntegrationCounter] = None) -> RiccatiPath:
    """Integrate the matrix Riccati equation backward along a full trajectory.

    The stored matrix ``P`` solves ``P' = -A^T P - P A + S`` with
    ``A = D_x f`` and ``S = sum_i p_i D_x^2 f^i``, from ``P(T) = -D^2 cost``.
    With this sign convention ``-P(t)`` is the Hessian of the super-adjoint
    at the reference trajectory.
    """
    if terminal is None:
        if problem.cost_hess is None:
            raise MissingHessian("second-order analysis needs cost_hess")
        terminal = -np.asarray(problem.cost_hess(trajectory.final), dtype=float)
    if trajectory.start != 0 or trajectory.stop != problem.horizon.n_steps:
        raise ValueError("Riccati integration needs a full-horizon trajectory")
    grid = problem.horizon
    h = grid.h
    P = np.array(terminal, dtype=float)
    P = 0.5 * (P + P.T)
    out = np.empty((grid.node_count,) + P.shape)
    out[-1] = P
    for k in range(grid.n_steps - 1, -1, -1):
        (t0, tm, t1), (x0, xm, x1), (a0, am, a1) = _coefficients(problem, control, trajectory, k)
        p0, p1 = costate.at(k), costate.at(k + 1)
        pm = hermite_midpoint(p0, p1, -a0.T @ p0, -a1.T @ p1, h)
        s0 = hamiltonian_hessian(problem, control, k, t0, x0, p0)
        sm = hamiltonian_hessian(problem, control, k, tm, xm, pm)
        s1 = hamiltonian_hessian(problem, control, k, t1, x1, p1)
        # reversed time: dP/ds = A^T P + P A - S
        P = _rk4(
            lambda y: a1.T @ y + y @ a1 - s1,
            lambda y: am.T @ y + y @ am - sm,
            lambda y: a0.T @ y + y @ a0 - s0,
            P, h,
        )
        P = 0.5 * (P + P.T)
        _finite(P, "Riccati matrix", k)
        out[k] = P
    _count(counter, grid.n_steps, grid.n_steps)
    return RiccatiPath(grid, out)


def integrate_linearized(problem: ControlProblem, reference: AnyControl, target: AnyControl,
                         trajectory: Trajectory,
                         counter: Optional[IntegrationCounter] = None) -> np.ndarray:
    """Solve ``y' = D_x f(x_ref, u_ref) y + f(x_ref, u) - f(x_ref, u_ref)``, ``y(0) = 0``."""
    grid = problem.horizon
    h = grid.h
    y = np.zeros(problem.state_dim)
    out = np.empty((trajectory.states.shape[0], problem.state_dim))
    out[0] = y
    for k in range(trajectory.start, trajectory.stop):
        ts, xs, (a0, am, a1) = _coefficients(problem, reference, trajectory, k)
        b = [problem.field(target, k, t, x) - problem.field(reference, k, t, x)
             for t, x in zip(ts, xs)]
        y = _rk4(
            lambda v: a0 @ v + b[0],
            lambda v: am @ v + b[1],
            lambda v: a1 @ v + b[2],
            y, h,
        )
        _finite(y, "linearized state", k)
        out[k - trajectory.start + 1] = y
    _count(counter, trajectory.stop - trajectory.start, grid.n_steps)
    return out


def pullback_batch(grid: TimeGrid, starts: Sequence[int], states, field: Callable,
                   adjoint_action: Callable, terminal: Callable,
                   counter: Optional[IntegrationCounter] = None,
                   memory_floats: float = 6e6):
    """Flow many initial conditions to the horizon and pull a covector back.

    Member ``b`` starts at node ``starts[b]`` with state ``states[b]``.  It is
    integrated forward to ``T`` with ``field(k, t, X)``; ``terminal(X_T)``
    returns values and covectors there, and the covector is carried back to
    ``starts[b]`` by the transposed linearization.  ``adjoint_action(k, t, X)``
    must return a callable ``Y -> D field(X)^T Y`` acting member-wise.

    Members are processed in chunks sorted by start node so the stored paths
    stay below ``memory_floats`` numbers; within a chunk, step ``k`` only
    touches members that have started by node ``k``.

    Returns
    -------
    values : ndarray, shape (B,)
    covectors : ndarray, shape like ``states``
    """
    starts = np.asarray(starts, dtype=int)
    states = np.asarray(states, dtype=float)
    if states.shape[0] != starts.shape[0]:
        raise DimensionMismatch("one start node per state is required")
    if np.any(starts < 0) or np.any(starts > grid.n_steps):
        raise ValueError("start nodes must lie on the grid")
    n = grid.n_steps
    h = grid.h
    shape = states.shape[1:]
    size = int(np.prod(shape)) if shape else 1
    order = np.argsort(starts, kind="stable")
    values = np.empty(starts.shape[0])
    covectors = np.empty_like(states)
    total_steps = 0

    pos = 0
    while pos < order.size:
        first = starts[order[pos]]
        per_member = (n - first + 1) * size
        take = max(1, int(memory_floats // max(per_member, 1)))
        members = order[pos:pos + take]
        pos += take
        s = starts[members]
        b = members.size
        active = np.searchsorted(s, np.arange(n + 1), side="right")
        path = np.empty((n - first + 1, b) + shape)
        X = states[members].copy()
        path[0] = X
        for k in range(first, n):
            a = active[k]
            t0, tm, t1 = _stage_times(grid, k)
            X[:a] = _rk4(
                lambda y: field(k, t0, y),
                lambda y: field(k, tm, y),
                lambda y: field(k, t1, y),
                X[:a], h,
            )
            _finite(X[:a], "state", k)
            path[k - first + 1] = X
        vals, Y = terminal(X)
        Y = np.array(Y, dtype=float)
        values[members] = vals
        for k in range(n - 1, first - 1, -1):
            a = active[k]
            t0, tm, t1 = _stage_times(grid, k)
            X0 = path[k - first, :a]
            X1 = path[k - first + 1, :a]
            Xm = hermite_midpoint(X0, X1, field(k, t0, X0), field(k, t1, X1), h)
            b0 = adjoint_action(k, t0, X0)
            bm = adjoint_action(k, tm, Xm)
            b1 = adjoint_action(k, t1, X1)
            Y[:a] = _rk4(b1, bm, b0, Y[:a], h)
            _finite(Y[:a], "covector", k)
        covectors[members] = Y
        total_steps += 2 * int(np.sum(n - s))
    _count(counter, total_steps, n)
    return values, covectors
