"""Mean-field control by particle discretization.

An empirical measure ``mu = (1/N) sum_i delta_{x_i}`` is transported by a
nonlocal field ``F(x, mu, u)``; the particles are its characteristics and the
weights never change.  The costate is carried per particle, so the lifted
measure is ``(1/N) sum_i delta_{(x_i, y_i)}`` and the costate field at ``x_i``
is simply ``y_i`` (particles are labelled and never merged).

Callback conventions
--------------------
Callbacks act on whole particle arrays ``P`` of shape ``(..., N, n)``.  The
control ``u`` has shape ``(..., m)`` whose leading axes broadcast against the
batch axes of ``P`` (not against the particle axis)::

    field(t, P, u)          -> (..., N, n)        F(x_i, mu, u)
    jac_x(t, P, u)          -> (..., N, n, n)     D_x F(x_i, mu, u)
    jac_measure(t, P, u)    -> (..., N, N, n, n)  kernel D_mu F(x_i, mu, x_j)
    cost(P)                 -> (...)
    flat_gradient(P)        -> (..., N, n)        grad_x of the flat derivative at x_i

Optional ``measure_jvp(t, P, W, u)`` and ``measure_vjp(t, P, Y, u)`` return
``(1/N) sum_j K_ij W_j`` and ``(1/N) sum_j K_ji^T Y_j`` without forming the
``N x N`` kernel; they must agree with ``jac_measure``
(:func:`check_measure_contractions`).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from ._io import write_csv
from .descent import DescentConfig, descend
from .errors import DimensionMismatch
from .flow import IntegrationCounter, _count, _finite, _rk4, _stage_times, hermite_midpoint, pullback_batch
from .problem import AnyControl, Control, ControlProblem, ControlSet, RelaxedControl, TimeGrid
from .variations import IncrementReport, PmpReport, _residual_report, interval_trapezoid, minimize_over

__all__ = [
    "ParticleEnsemble",
    "LiftedEnsemble",
    "EnsemblePath",
    "LiftedPath",
    "MeanFieldProblem",
    "MeanFieldSuperAdjoint",
    "particle_flow",
    "pushforward_tangent",
    "lift_adjoint",
    "mf_super_adjoint_gradient",
    "mf_exact_increment",
    "mf_pmp_residual",
    "mf_descent",
    "wasserstein2_1d",
    "check_measure_derivative",
    "check_measure_contractions",
    "check_flat_gradient",
]


def _points(a) -> np.ndarray:
    if isinstance(a, (ParticleEnsemble, LiftedEnsemble)):
        return a.points
    return np.asarray(a, dtype=float)


@dataclass(frozen=True, eq=False)
class ParticleEnsemble:
    """Empirical measure with uniform weights ``1/N``."""

    points: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float)
        if p.ndim == 1:
            p = p[:, None]
        if p.ndim != 2 or p.shape[0] < 1:
            raise DimensionMismatch("an ensemble needs at least one point of shape (n,)")
        if not np.all(np.isfinite(p)):
            raise ValueError("ensemble points must be finite")
        p = p.copy()
        p.setflags(write=False)
        object.__setattr__(self, "points", p)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def mean(self) -> np.ndarray:
        return self.points.mean(axis=0)


@dataclass(frozen=True, eq=False)
class LiftedEnsemble:
    """Particles paired with their costates ``(x_i, y_i)``."""

    points: np.ndarray
    covectors: np.ndarray

    def __post_init__(self):
        if np.shape(self.points) != np.shape(self.covectors):
            raise DimensionMismatch("points and covectors must have the same shape")


@dataclass(frozen=True, eq=False)
class EnsemblePath:
    """Particle positions on nodes ``start .. start + len(points) - 1``."""

    grid: TimeGrid
    points: np.ndarray
    start: int = 0

    @property
    def stop(self) -> int:
        return self.start + self.points.shape[0] - 1

    @property
    def final(self) -> np.ndarray:
        return self.points[-1]

    def __len__(self) -> int:
        return self.points.shape[0]

    def at(self, k: int) -> ParticleEnsemble:
        return ParticleEnsemble(self.points[k - self.start])

    def to_csv(self, path) -> None:
        """Rows ``t, particle, x1..xn``."""
        n = self.points.shape[2]
        times = self.grid.nodes[self.start:self.stop + 1]

        def rows():
            for t, snap in zip(times, self.points):
                for i, x in enumerate(snap):
                    yield [t, i, *x]

        write_csv(path, ["t", "particle"] + [f"x{i + 1}" for i in range(n)], rows())


@dataclass(frozen=True, eq=False)
class LiftedPath:
    grid: TimeGrid
    points: np.ndarray
    covectors: np.ndarray
    start: int = 0

    def at(self, k: int) -> LiftedEnsemble:
        return LiftedEnsemble(self.points[k - self.start], self.covectors[k - self.start])


@dataclass(frozen=True, eq=False)
class MeanFieldProblem:
    """Mayer problem ``min cost(mu_T)`` for the nonlocal flow of an ensemble."""

    state_dim: int
    control_dim: int
    field: Callable
    jac_x: Callable
    jac_measure: Callable
    cost: Callable
    flat_gradient: Callable
    control_set: ControlSet
    horizon: TimeGrid
    ensemble0: np.ndarray
    measure_jvp: Optional[Callable] = None
    measure_vjp: Optional[Callable] = None
    name: str = "mean-field"

    def __post_init__(self):
        p = _points(self.ensemble0)
        p = ParticleEnsemble(p).points
        if p.shape[1] != self.state_dim:
            raise DimensionMismatch(f"ensemble points must have {self.state_dim} components")
        if self.control_set.dim != self.control_dim:
            raise DimensionMismatch("control set dimension differs from control_dim")
        object.__setattr__(self, "ensemble0", p)

    @property
    def particles(self) -> int:
        return self.ensemble0.shape[0]

    def with_horizon(self, grid: TimeGrid) -> "MeanFieldProblem":
        return dataclasses.replace(self, horizon=grid)

    def with_ensemble(self, points) -> "MeanFieldProblem":
        return dataclasses.replace(self, ensemble0=_points(points))

    def velocity(self, control: AnyControl, k: int, t: float, P):
        return control.apply(self.field, k, t, P)

    def jvp(self, control: AnyControl, k: int, t: float, P, W):
        if self.measure_jvp is not None:
            fn = lambda s, X, u: self.measure_jvp(s, X, W, u)
        else:
            fn = lambda s, X, u: np.einsum("...ijab,...jb->...ia", self.jac_measure(s, X, u), W) / X.shape[-2]
        return control.apply(fn, k, t, P)

    def vjp(self, control: AnyControl, k: int, t: float, P, Y):
        if self.measure_vjp is not None:
            fn = lambda s, X, u: self.measure_vjp(s, X, Y, u)
        else:
            fn = lambda s, X, u: np.einsum("...jiba,...jb->...ia", self.jac_measure(s, X, u), Y) / X.shape[-2]
        return control.apply(fn, k, t, P)

    def tangent_action(self, control: AnyControl, k: int, t: float, P):
        """Callable ``W -> D_x F W + (1/N) sum_j K_ij W_j`` at ``P``."""
        J = control.apply(self.jac_x, k, t, P)
        return lambda W: np.einsum("...iab,...ib->...ia", J, W) + self.jvp(control, k, t, P, W)

    def adjoint_action(self, control: AnyControl, k: int, t: float, P):
        """Callable ``Y -> D_x F^T Y + (1/N) sum_j K_ji^T Y_j`` at ``P``."""
        J = control.apply(self.jac_x, k, t, P)
        return lambda Y: np.einsum("...iba,...ib->...ia", J, Y) + self.vjp(control, k, t, P, Y)

    def hamiltonian(self, t: float, P, Y, U) -> np.ndarray:
        """``(1/N) sum_i y_i . F(x_i, mu, u)`` for each row of ``U``."""
        U = np.atleast_2d(np.asarray(U, dtype=float))
        V = self.field(t, P[None], U)
        return np.einsum("kia,ia->k", V, Y) / P.shape[0]

    @classmethod
    def from_classical(cls, problem: ControlProblem, ensemble0) -> "MeanFieldProblem":
        """Measure-independent field ``f`` with the linear cost ``mu -> int cost dmu``."""
        n = problem.state_dim

        def field(t, P, u):
            return problem.dynamics(t, P, np.asarray(u, dtype=float)[..., None, :])

        def jac_x(t, P, u):
            return problem.dynamics_jac_x(t, P, np.asarray(u, dtype=float)[..., None, :])

        def jac_measure(t, P, u):
            N = P.shape[-2]
            shape = np.broadcast_shapes(P.shape[:-2], np.shape(u)[:-1])
            return np.zeros(shape + (N, N, n, n))

        def zero(t, P, W, u):
            return np.zeros(np.broadcast_shapes(P.shape, np.shape(u)[:-1] + (1, 1)))

        return cls(
            n, problem.control_dim, field, jac_x, jac_measure,
            lambda P: np.mean(problem.cost(P), axis=-1),
            lambda P: problem.cost_grad(P),
            problem.control_set, problem.horizon, _points(ensemble0),
            measure_jvp=zero, measure_vjp=zero, name=f"{problem.name}-particles",
        )


def _check_grid(mfp: MeanFieldProblem, control: AnyControl) -> None:
    if control.grid != mfp.horizon:
        raise DimensionMismatch("control grid differs from the problem horizon")


def particle_flow(mfp: MeanFieldProblem, control: AnyControl, ensemble0=None, start: int = 0,
                  stop: Optional[int] = None, counter: Optional[IntegrationCounter] = None
                  ) -> EnsemblePath:
    """RK4 on the coupled particle system from node ``start`` to ``stop``."""
    _check_grid(mfp, control)
    grid = mfp.horizon
    stop = grid.n_steps if stop is None else stop
    if not 0 <= start <= stop <= grid.n_steps:
        raise ValueError(f"need 0 <= start <= stop <= {grid.n_steps}")
    P = np.array(mfp.ensemble0 if ensemble0 is None else _points(ensemble0), dtype=float)
    if P.ndim != 2 or P.shape[1] != mfp.state_dim:
        raise DimensionMismatch("ensemble has the wrong shape")
    out = np.empty((stop - start + 1,) + P.shape)
    out[0] = P
    for k in range(start, stop):
        t0, tm, t1 = _stage_times(grid, k)
        P = _rk4(
            lambda X: mfp.velocity(control, k, t0, X),
            lambda X: mfp.velocity(control, k, tm, X),
            lambda X: mfp.velocity(control, k, t1, X),
            P, grid.h,
        )
        _finite(P, "particle state", k)
        out[k - start + 1] = P
    _count(counter, stop - start, grid.n_steps)
    return EnsemblePath(grid, out, start)


def _stage_points(mfp, control, path: EnsemblePath, k: int):
    grid = mfp.horizon
    t0, tm, t1 = _stage_times(grid, k)
    X0, X1 = path.points[k - path.start], path.points[k + 1 - path.start]
    Xm = hermite_midpoint(X0, X1, mfp.velocity(control, k, t0, X0),
                          mfp.velocity(control, k, t1, X1), grid.h)
    return (t0, tm, t1), (X0, Xm, X1)


def pushforward_tangent(mfp: MeanFieldProblem, control: AnyControl, path: EnsemblePath, w0,
                        counter: Optional[IntegrationCounter] = None) -> np.ndarray:
    """Tangent field transported by the linearized nonlocal flow; shape ``(nodes, N, n)``."""
    W = np.array(w0, dtype=float)
    if W.shape != path.points.shape[1:]:
        raise DimensionMismatch("tangent field must have one vector per particle")
    out = np.empty_like(path.points)
    out[0] = W
    h = mfp.horizon.h
    for k in range(path.start, path.stop):
        ts, Xs = _stage_points(mfp, control, path, k)
        ops = [mfp.tangent_action(control, k, t, X) for t, X in zip(ts, Xs)]
        W = _rk4(ops[0], ops[1], ops[2], W, h)
        _finite(W, "tangent field", k)
        out[k - path.start + 1] = W
    _count(counter, path.stop - path.start, mfp.horizon.n_steps)
    return out


def lift_adjoint(mfp: MeanFieldProblem, control: AnyControl, path: EnsemblePath, terminal=None,
                 counter: Optional[IntegrationCounter] = None) -> LiftedPath:
    """Backward costates along a stored particle path.

    The terminal costate defaults to ``flat_gradient`` at the final particles.
    """
    Y = np.array(mfp.flat_gradient(path.final) if terminal is None else terminal, dtype=float)
    if Y.shape != path.points.shape[1:]:
        raise DimensionMismatch("terminal costate must have one vector per particle")
    out = np.empty_like(path.points)
    out[-1] = Y
    h = mfp.horizon.h
    for k in range(path.stop - 1, path.start - 1, -1):
        ts, Xs = _stage_points(mfp, control, path, k)
        ops = [mfp.adjoint_action(control, k, t, X) for t, X in zip(ts, Xs)]
        Y = _rk4(ops[2], ops[1], ops[0], Y, h)
        _finite(Y, "costate", k)
        out[k - path.start] = Y
    _count(counter, path.stop - path.start, mfp.horizon.n_steps)
    return LiftedPath(mfp.horizon, path.points, out, path.start)


class MeanFieldSuperAdjoint:
    """Cost-to-go ``mu -> cost(Phi_{k->T}(mu))`` of a reference control and its gradient field."""

    cheap = False

    def __init__(self, mfp: MeanFieldProblem, reference: AnyControl,
                 counter: Optional[IntegrationCounter] = None):
        _check_grid(mfp, reference)
        self.mfp = mfp
        self.reference = reference
        self.counter = counter

    def batch(self, nodes, ensembles):
        """Values ``(B,)`` and per-particle gradients ``(B, N, n)`` at many node/ensemble pairs."""
        mfp, ref = self.mfp, self.reference
        nodes = np.atleast_1d(np.asarray(nodes, dtype=int))
        ens = np.asarray(ensembles, dtype=float).reshape((nodes.size,) + mfp.ensemble0.shape[-2:])

        def field(k, t, X):
            return mfp.velocity(ref, k, t, X)

        def adjoint_action(k, t, X):
            return mfp.adjoint_action(ref, k, t, X)

        def terminal(X):
            return mfp.cost(X), mfp.flat_gradient(X)

        return pullback_batch(mfp.horizon, nodes, ens, field, adjoint_action, terminal,
                              counter=self.counter)

    def value(self, k: int, ensemble) -> float:
        return float(self.batch([k], _points(ensemble)[None])[0][0])

    def gradient(self, k: int, ensemble) -> np.ndarray:
        return self.batch([k], _points(ensemble)[None])[1][0]

    def along(self, path: EnsemblePath) -> np.ndarray:
        nodes = np.arange(path.start, path.stop + 1)
        return self.batch(nodes, path.points)[1]


def mf_super_adjoint_gradient(mfp: MeanFieldProblem, u_ref: AnyControl, k: int, ensemble) -> np.ndarray:
    """Per-particle costates ``y_i`` representing the gradient of the cost-to-go at node ``k``."""
    return MeanFieldSuperAdjoint(mfp, u_ref).gradient(k, ensemble)


def _ensemble_pairing(mfp, target, reference, k, t, P, Y) -> float:
    dv = mfp.velocity(target, k, t, P) - mfp.velocity(reference, k, t, P)
    return float(np.sum(Y * dv) / P.shape[0])


def mf_exact_increment(mfp: MeanFieldProblem, u_ref: AnyControl, u_target: AnyControl,
                       counter: Optional[IntegrationCounter] = None) -> IncrementReport:
    """Mean-field exact increment: predicted versus realized cost change."""
    grid = mfp.horizon
    sa = MeanFieldSuperAdjoint(mfp, u_ref, counter)
    ref_path = particle_flow(mfp, u_ref, counter=counter)
    new_path = particle_flow(mfp, u_target, counter=counter)
    Y = sa.along(new_path)
    left = np.empty(grid.n_steps)
    right = np.empty(grid.n_steps)
    for k in range(grid.n_steps):
        t0, t1 = grid.time(k), grid.time(k) + grid.h
        left[k] = _ensemble_pairing(mfp, u_target, u_ref, k, t0, new_path.points[k], Y[k])
        right[k] = _ensemble_pairing(mfp, u_target, u_ref, k, t1, new_path.points[k + 1], Y[k + 1])
    predicted = interval_trapezoid(grid.h, left, right)
    j_ref = float(mfp.cost(ref_path.final))
    j_new = float(mfp.cost(new_path.final))
    realized = j_new - j_ref
    return IncrementReport(predicted, realized, abs(predicted - realized), grid.h, j_ref, j_new)


def mf_pmp_residual(mfp: MeanFieldProblem, u_ref: AnyControl,
                    counter: Optional[IntegrationCounter] = None) -> PmpReport:
    """Integrated gap of the ensemble Hamiltonian ``(1/N) sum_i y_i . F(x_i, mu, u)``."""
    path = particle_flow(mfp, u_ref, counter=counter)
    lifted = lift_adjoint(mfp, u_ref, path, counter=counter)
    ref_vals = u_ref.values if isinstance(u_ref, Control) else None

    def hamiltonians(k, t, node):
        P, Y = path.points[node], lifted.covectors[node]
        h_ref = float(np.sum(Y * mfp.velocity(u_ref, k, t, P)) / P.shape[0])
        ref = None if ref_vals is None else ref_vals[k]
        u, h_min = minimize_over(lambda U: mfp.hamiltonian(t, P, Y, U), mfp.control_set, ref)
        return h_ref, min(h_min, h_ref), u

    return _residual_report(mfp.horizon, mfp.control_dim, hamiltonians)


class MeanFieldModel:
    """Adapter exposing a :class:`MeanFieldProblem` to the generic descent loop."""

    def __init__(self, mfp: MeanFieldProblem, counter: IntegrationCounter):
        self.mfp = mfp
        self.counter = counter
        self.grid = mfp.horizon
        self.control_set = mfp.control_set
        self.initial_state = mfp.ensemble0

    def path(self, control, start, stop, state0) -> np.ndarray:
        return particle_flow(self.mfp, control, state0, start, stop, counter=self.counter).points

    def cost(self, state) -> float:
        return float(self.mfp.cost(state))

    def super_adjoint(self, reference, reference_path=None):
        return MeanFieldSuperAdjoint(self.mfp, reference, self.counter)

    def terminal_covector(self, state):
        return np.asarray(self.mfp.flat_gradient(state), dtype=float)

    def hamiltonian_fn(self, t, state, covector):
        return lambda U: self.mfp.hamiltonian(t, state, covector, U)

    def pairing(self, control, k, t, state, covector) -> float:
        return float(np.sum(covector * self.mfp.velocity(control, k, t, state)) / state.shape[0])

    def residual(self, control) -> float:
        return mf_pmp_residual(self.mfp, control).residual


def mf_descent(mfp: MeanFieldProblem, u_init: AnyControl, config: DescentConfig = DescentConfig(),
               counter: Optional[IntegrationCounter] = None, strategy: str = "auto"):
    """Feedback descent on the particle system; same contract as :func:`descent.solve`."""
    _check_grid(mfp, u_init)
    counter = counter if counter is not None else IntegrationCounter()
    return descend(MeanFieldModel(mfp, counter), u_init, config, strategy)


def wasserstein2_1d(a, b) -> float:
    """Quadratic Wasserstein distance of two equal-size one-dimensional ensembles."""
    pa, pb = _points(a), _points(b)
    pa = pa[:, None] if pa.ndim == 1 else pa
    pb = pb[:, None] if pb.ndim == 1 else pb
    if pa.shape[1] != 1 or pb.shape[1] != 1:
        raise DimensionMismatch("wasserstein2_1d needs one-dimensional ensembles")
    if pa.shape[0] != pb.shape[0]:
        raise DimensionMismatch("wasserstein2_1d needs ensembles of equal size")
    gap = np.sort(pa[:, 0]) - np.sort(pb[:, 0])
    return float(np.sqrt(np.mean(gap * gap)))


def check_measure_derivative(mfp: MeanFieldProblem, t: float, points, u, step: float = 1e-6,
                             rtol: float = 1e-5):
    """Compare ``jac_x`` and ``jac_measure`` with single-particle finite differences.

    Moving particle ``j`` changes ``F(x_i, mu)`` by
    ``(delta_ij D_x F_i + K_ij / N) dx_j``.  Returns ``(ok, worst_relative_error)``.
    """
    P = np.asarray(points, dtype=float)
    N, n = P.shape
    u = np.asarray(u, dtype=float)
    J = mfp.jac_x(t, P, u)
    K = mfp.jac_measure(t, P, u)
    expected = K / N
    expected[np.arange(N), np.arange(N)] += J
    fd = np.empty_like(expected)
    d = step * (1.0 + np.abs(P).max())
    for j in range(N):
        for b in range(n):
            Pp, Pm = P.copy(), P.copy()
            Pp[j, b] += d
            Pm[j, b] -= d
            fd[:, j, :, b] = (mfp.field(t, Pp, u) - mfp.field(t, Pm, u)) / (2 * d)
    err = np.abs(fd - expected).max() / max(np.abs(expected).max(), 1e-12)
    return bool(err <= rtol), float(err)


def check_measure_contractions(mfp: MeanFieldProblem, t: float, points, u, rng=None,
                               rtol: float = 1e-12):
    """Check the structured ``measure_jvp``/``measure_vjp`` against the dense kernel."""
    rng = np.random.default_rng(0) if rng is None else rng
    P = np.asarray(points, dtype=float)
    W = rng.standard_normal(P.shape)
    u = np.asarray(u, dtype=float)
    K = mfp.jac_measure(t, P, u)
    N = P.shape[0]
    dense_jvp = np.einsum("ijab,jb->ia", K, W) / N
    dense_vjp = np.einsum("jiba,jb->ia", K, W) / N
    worst = 0.0
    for fn, dense in ((mfp.measure_jvp, dense_jvp), (mfp.measure_vjp, dense_vjp)):
        if fn is None:
            continue
        got = fn(t, P, W, u)
        worst = max(worst, float(np.abs(got - dense).max() / max(np.abs(dense).max(), 1e-300)))
    return worst <= rtol, worst


def check_flat_gradient(mfp: MeanFieldProblem, points, step: float = 1e-6, rtol: float = 1e-5):
    """Moving particle ``j`` changes the cost by ``(1/N) flat_gradient_j . dx_j``."""
    P = np.asarray(points, dtype=float)
    N, n = P.shape
    g = np.asarray(mfp.flat_gradient(P), dtype=float) / N
    d = step * (1.0 + np.abs(P).max())
    fd = np.empty_like(P)
    for j in range(N):
        for b in range(n):
            Pp, Pm = P.copy(), P.copy()
            Pp[j, b] += d
            Pm[j, b] -= d
            fd[j, b] = (mfp.cost(Pp) - mfp.cost(Pm)) / (2 * d)
    err = np.abs(fd - g).max() / max(np.abs(g).max(), 1e-12)
    return bool(err <= rtol), float(err)
