"""Problem definitions, time grids, control sets and control representations.

Every solver in the package works on a uniform grid ``t_k = t0 + k*h`` with
controls that are constant on each interval ``[t_k, t_{k+1})``.  A relaxed
(generalized) control is a probability vector over a fixed list of control
atoms on every interval; the ordinary control ``v`` is embedded as the Dirac
family ``delta_{v(t)}``.

Callback conventions
--------------------
All user callbacks take a scalar time and broadcast over the leading axes of
their array arguments::

    dynamics(t, x, u)        x: (..., n), u: (..., m)  -> (..., n)
    dynamics_jac_x(t, x, u)                          -> (..., n, n)
    cost(x)                                          -> (...)
    cost_grad(x)                                     -> (..., n)
    cost_hess(x)                                     -> (..., n, n)

Broadcasting lets the integrators advance a whole batch of trajectories at
once and lets the Hamiltonian minimizer score many candidate controls in a
single call.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from ._io import write_csv
from .errors import DimensionMismatch, ValueNotAnAtom

__all__ = [
    "TimeGrid",
    "Box",
    "Atoms",
    "ControlSet",
    "Control",
    "RelaxedControl",
    "AnyControl",
    "ControlProblem",
    "relax",
    "mean_field_value",
    "convex_combination",
    "check_cost_gradient",
    "check_dynamics_jacobian",
]


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time grid on ``[t0, T]`` with ``n_steps`` intervals."""

    t0: float
    T: float
    n_steps: int

    def __post_init__(self):
        object.__setattr__(self, "t0", float(self.t0))
        object.__setattr__(self, "T", float(self.T))
        if not self.T > self.t0:
            raise ValueError(f"grid needs T > t0, got t0={self.t0}, T={self.T}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps!r}")
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def h(self) -> float:
        return (self.T - self.t0) / self.n_steps

    @property
    def node_count(self) -> int:
        return self.n_steps + 1

    @property
    def nodes(self) -> np.ndarray:
        return self.t0 + np.arange(self.n_steps + 1) * self.h

    def time(self, k: int) -> float:
        return self.t0 + k * self.h

    def interval_index(self, t: float) -> int:
        """Index of the interval containing ``t`` (the last one for ``t = T``)."""
        slack = 1e-12 * max(1.0, abs(self.T), abs(self.t0))
        if t < self.t0 - slack or t > self.T + slack:
            raise ValueError(f"time {t} outside grid span [{self.t0}, {self.T}]")
        k = int(np.floor((t - self.t0) / self.h))
        return min(max(k, 0), self.n_steps - 1)

    def with_steps(self, n_steps: int) -> "TimeGrid":
        return TimeGrid(self.t0, self.T, n_steps)


@dataclass(frozen=True, eq=False)
class Box:
    """Componentwise bounds ``lower <= u <= upper``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float)).copy()
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float)).copy()
        if lo.ndim != 1 or lo.shape != hi.shape:
            raise DimensionMismatch("box bounds must be vectors of equal length")
        if np.any(lo > hi):
            raise ValueError("box needs lower <= upper componentwise")
        object.__setattr__(self, "lower", _readonly(lo))
        object.__setattr__(self, "upper", _readonly(hi))

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def contains(self, u, tol: float = 1e-12) -> bool:
        u = np.asarray(u, dtype=float)
        return bool(np.all(u >= self.lower - tol) and np.all(u <= self.upper + tol))


@dataclass(frozen=True, eq=False)
class Atoms:
    """A finite control set given as a list of control vectors."""

    atoms: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.atoms, dtype=float)
        if a.ndim == 1:
            a = a[:, None]
        if a.ndim != 2 or a.shape[0] == 0:
            raise ValueError("atom list must be a non-empty list of equal-length vectors")
        object.__setattr__(self, "atoms", _readonly(a.copy()))

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    def index_of(self, u) -> int:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        hits = np.flatnonzero(np.all(self.atoms == u, axis=1))
        if hits.size == 0:
            raise ValueNotAnAtom(f"control value {u.tolist()} is not an atom")
        return int(hits[0])

    def contains(self, u, tol: float = 0.0) -> bool:
        u = np.asarray(u, dtype=float).reshape(-1, self.dim)
        d = np.abs(u[:, None, :] - self.atoms[None, :, :]).max(axis=2)
        return bool(np.all(d.min(axis=1) <= tol))


ControlSet = Union[Box, Atoms]


@dataclass(frozen=True, eq=False)
class Control:
    """Piecewise-constant control: ``values[k]`` acts on ``[t_k, t_{k+1})``."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] != self.grid.n_steps:
            raise DimensionMismatch(
                f"control needs {self.grid.n_steps} rows, got shape {np.shape(self.values)}"
            )
        object.__setattr__(self, "values", _readonly(v.copy()))

    @classmethod
    def constant(cls, grid: TimeGrid, value) -> "Control":
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(grid, np.tile(value, (grid.n_steps, 1)))

    @classmethod
    def from_function(cls, grid: TimeGrid, fn: Callable[[float], object]) -> "Control":
        """Sample ``fn`` at interval midpoints."""
        mids = grid.nodes[:-1] + 0.5 * grid.h
        return cls(grid, np.array([np.atleast_1d(fn(t)) for t in mids], dtype=float))

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def apply(self, fn, k: int, t: float, x):
        return fn(t, x, self.values[k])

    def on_grid(self, grid: TimeGrid) -> "Control":
        """Resample onto another grid covering the same span (midpoint rule)."""
        if grid == self.grid:
            return self
        return Control.from_function(grid, lambda t: self.values[self.grid.interval_index(t)])

    def to_csv(self, path) -> None:
        """One row per interval: start time, then the control components."""
        header = ["t"] + [f"u{i + 1}" for i in range(self.dim)]
        write_csv(path, header, ([t, *row] for t, row in zip(self.grid.nodes[:-1], self.values)))


@dataclass(frozen=True, eq=False)
class RelaxedControl:
    """Per-interval probability weights over a shared atom list."""

    grid: TimeGrid
    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.atoms, dtype=float)
        if a.ndim == 1:
            a = a[:, None]
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 2 or w.shape != (self.grid.n_steps, a.shape[0]):
            raise DimensionMismatch(
                f"weights need shape ({self.grid.n_steps}, {a.shape[0]}), got {w.shape}"
            )
        if np.any(w < 0):
            raise ValueError("relaxed-control weights must be nonnegative")
        if np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("relaxed-control weights must sum to 1 on every interval")
        object.__setattr__(self, "atoms", _readonly(a.copy()))
        object.__setattr__(self, "weights", _readonly(w.copy()))

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    def apply(self, fn, k: int, t: float, x):
        """Weighted sum ``sum_j w_kj fn(t, x, atom_j)`` over the atoms in use."""
        w = self.weights[k]
        out = None
        for j in np.flatnonzero(w):
            term = w[j] * np.asarray(fn(t, x, self.atoms[j]))
            out = term if out is None else out + term
        return out

    def on_grid(self, grid: TimeGrid) -> "RelaxedControl":
        if grid == self.grid:
            return self
        mids = grid.nodes[:-1] + 0.5 * grid.h
        rows = [self.weights[self.grid.interval_index(t)] for t in mids]
        return RelaxedControl(grid, self.atoms, np.array(rows))


AnyControl = Union[Control, RelaxedControl]


def relax(control: Control, atoms) -> RelaxedControl:
    """Embed an ordinary control as one-hot weights over ``atoms``.

    Raises
    ------
    ValueNotAnAtom
        If some control value is not (exactly) one of the atoms.
    """
    aset = Atoms(atoms)
    if aset.dim != control.dim:
        raise DimensionMismatch("atom dimension differs from control dimension")
    weights = np.zeros((control.grid.n_steps, aset.atoms.shape[0]))
    for k, v in enumerate(control.values):
        weights[k, aset.index_of(v)] = 1.0
    return RelaxedControl(control.grid, aset.atoms, weights)


def mean_field_value(rc: AnyControl, t: float, f, x):
    """Velocity ``int_U f(t, x, u) d rc_t(u)`` of a (relaxed) control at time ``t``."""
    k = rc.grid.interval_index(t)
    return rc.apply(f, k, t, x)


def _atoms_and_weights(u: AnyControl):
    if isinstance(u, RelaxedControl):
        return u.atoms, u.weights
    atoms, inverse = np.unique(u.values, axis=0, return_inverse=True)
    weights = np.zeros((u.grid.n_steps, atoms.shape[0]))
    weights[np.arange(u.grid.n_steps), inverse.ravel()] = 1.0
    return atoms, weights


def convex_combination(u_ref: AnyControl, u_target: AnyControl, eps: float) -> AnyControl:
    """The weak variation ``u_ref + eps*(u_target - u_ref)`` as a relaxed control.

    The endpoints ``eps = 0`` and ``eps = 1`` return the inputs unchanged.
    """
    if u_ref.grid != u_target.grid:
        raise DimensionMismatch("controls live on different grids")
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must lie in [0, 1]")
    if eps == 0.0:
        return u_ref
    if eps == 1.0:
        return u_target
    a0, w0 = _atoms_and_weights(u_ref)
    a1, w1 = _atoms_and_weights(u_target)
    atoms, inverse = np.unique(np.vstack([a0, a1]), axis=0, return_inverse=True)
    inverse = inverse.ravel()
    weights = np.zeros((u_ref.grid.n_steps, atoms.shape[0]))
    np.add.at(weights.T, inverse[: a0.shape[0]], (1.0 - eps) * w0.T)
    np.add.at(weights.T, inverse[a0.shape[0]:], eps * w1.T)
    # renormalise away the last-ulp drift of (1-eps) + eps
    weights /= weights.sum(axis=1, keepdims=True)
    return RelaxedControl(u_ref.grid, atoms, weights)


@dataclass(frozen=True, eq=False)
class ControlProblem:
    """Mayer problem: minimize ``cost(x(T))`` subject to ``x' = dynamics(t, x, u)``.

    ``state_affine`` declares that ``dynamics`` is affine in ``x`` for every
    fixed ``(t, u)`` (linear and bilinear systems).  The super-adjoint then
    uses exact transition matrices instead of re-integrating per query.
    """

    state_dim: int
    control_dim: int
    dynamics: Callable
    dynamics_jac_x: Callable
    cost: Callable
    cost_grad: Callable
    control_set: ControlSet
    horizon: TimeGrid
    x0: np.ndarray
    cost_hess: Optional[Callable] = None
    state_affine: bool = False
    name: str = "problem"

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float)).copy()
        if x0.shape != (self.state_dim,):
            raise DimensionMismatch(f"x0 must have length {self.state_dim}")
        if self.control_set.dim != self.control_dim:
            raise DimensionMismatch("control set dimension differs from control_dim")
        object.__setattr__(self, "x0", _readonly(x0))

    def with_horizon(self, grid: TimeGrid) -> "ControlProblem":
        return dataclasses.replace(self, horizon=grid)

    def with_x0(self, x0) -> "ControlProblem":
        return dataclasses.replace(self, x0=x0)

    def field(self, control: AnyControl, k: int, t: float, x):
        return control.apply(self.dynamics, k, t, x)

    def jacobian(self, control: AnyControl, k: int, t: float, x):
        return control.apply(self.dynamics_jac_x, k, t, x)

    def check_control(self, control: AnyControl) -> None:
        """Raise if ``control`` is on the wrong grid or leaves the control set."""
        if control.grid != self.horizon:
            raise DimensionMismatch("control grid differs from the problem horizon")
        if control.dim != self.control_dim:
            raise DimensionMismatch("control dimension differs from control_dim")
        vals = control.atoms if isinstance(control, RelaxedControl) else control.values
        if not self.control_set.contains(vals):
            raise ValueError("control leaves the admissible control set")


def check_cost_gradient(problem: ControlProblem, probes, rtol: float = 1e-5, step: float = 1e-6):
    """Compare ``cost_grad`` with central differences of ``cost``.

    Returns ``(ok, worst_relative_error)`` over the probe points.
    """
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    worst = 0.0
    n = problem.state_dim
    for x in probes:
        d = step * (1.0 + np.linalg.norm(x))
        shifts = d * np.eye(n)
        fd = (problem.cost(x + shifts) - problem.cost(x - shifts)) / (2 * d)
        g = np.asarray(problem.cost_grad(x), dtype=float)
        err = np.linalg.norm(fd - g) / max(np.linalg.norm(fd), np.linalg.norm(g), 1e-12)
        worst = max(worst, float(err))
    return worst <= rtol, worst


def check_dynamics_jacobian(problem: ControlProblem, probes, controls, rtol: float = 1e-5,
                            step: float = 1e-6, t: float = None):
    """Compare ``dynamics_jac_x`` with central differences of ``dynamics``."""
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    controls = np.atleast_2d(np.asarray(controls, dtype=float))
    t = problem.horizon.t0 if t is None else t
    n = problem.state_dim
    worst = 0.0
    for x in probes:
        for u in controls:
            d = step * (1.0 + np.linalg.norm(x))
            shifts = d * np.eye(n)
            fd = (problem.dynamics(t, x + shifts, u) - problem.dynamics(t, x - shifts, u)) / (2 * d)
            jac = np.asarray(problem.dynamics_jac_x(t, x, u), dtype=float)
            err = np.linalg.norm(fd.T - jac) / max(np.linalg.norm(jac), 1e-12)
            worst = max(worst, float(err))
    return worst <= rtol, worst
