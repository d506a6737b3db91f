"""Super-adjoint: the cost-to-go of the reference control as a function of state.

For a reference control ``u_ref`` the super-adjoint at node ``k`` is
``value(k, x) = cost(Phi_{k->T}(x))`` where ``Phi`` is the (discrete) flow of
the reference field.  Its spatial gradient is the covector carried back from
``T`` along the trajectory started at ``(t_k, x)``; along the reference
trajectory it coincides with the usual adjoint.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .errors import DimensionMismatch
from .flow import (
    IntegrationCounter,
    Trajectory,
    _coefficients,
    _count,
    _rk4,
    integrate_flow,
    pullback_batch,
)
from .problem import AnyControl, ControlProblem

__all__ = ["SuperAdjoint", "super_adjoint"]


class SuperAdjoint:
    """Super-adjoint of ``problem`` for the reference control ``reference``.

    Parameters
    ----------
    problem : ControlProblem
    reference : Control or RelaxedControl
    method : {"auto", "pullback", "affine"}
        ``"pullback"`` integrates the reference flow from each query point and
        pulls the cost gradient back.  ``"affine"`` is exact for state-affine
        dynamics: it precomputes the reference trajectory and the discrete
        transition matrices once, after which each query costs one matrix
        product.  ``"auto"`` picks ``"affine"`` when ``problem.state_affine``.
    counter : IntegrationCounter, optional
        Receives the integration work.
    reference_trajectory : Trajectory, optional
        Full-horizon trajectory of ``reference`` from ``problem.x0``; reused by
        the affine route when given.
    """

    def __init__(self, problem: ControlProblem, reference: AnyControl, method: str = "auto",
                 counter: Optional[IntegrationCounter] = None,
                 reference_trajectory: Optional[Trajectory] = None):
        if reference.grid != problem.horizon:
            raise DimensionMismatch("reference control grid differs from the problem horizon")
        if method == "auto":
            method = "affine" if problem.state_affine else "pullback"
        if method not in ("pullback", "affine"):
            raise ValueError(f"unknown super-adjoint method {method!r}")
        self.problem = problem
        self.reference = reference
        self.method = method
        self.counter = counter
        self._transport = None
        if method == "affine":
            self._build_transport(reference_trajectory)

    @property
    def cheap(self) -> bool:
        """True when single queries cost no integration."""
        return self.method == "affine"

    def _build_transport(self, traj: Optional[Trajectory]) -> None:
        pb, ref = self.problem, self.reference
        grid = pb.horizon
        if traj is None or traj.start != 0 or traj.stop != grid.n_steps:
            traj = integrate_flow(pb, ref, pb.x0, counter=self.counter)
        n = pb.state_dim
        lam = np.empty((grid.node_count, n, n))
        lam[-1] = np.eye(n)
        L = lam[-1]
        for k in range(grid.n_steps - 1, -1, -1):
            _, _, (a0, am, a1) = _coefficients(pb, ref, traj, k)
            L = _rk4(lambda y: a1.T @ y, lambda y: am.T @ y, lambda y: a0.T @ y, L, grid.h)
            lam[k] = L
        _count(self.counter, grid.n_steps, grid.n_steps)
        self._transport = (traj.states, lam)

    def _terminal_states(self, nodes, xs):
        base, lam = self._transport
        dx = xs - base[nodes]
        z = base[-1] + np.einsum("bij,bi->bj", lam[nodes], dx)
        return z, lam[nodes]

    def batch(self, nodes, xs):
        """Values and gradients at many ``(node, state)`` pairs.

        Returns ``(values, gradients)`` with shapes ``(B,)`` and ``(B, n)``.
        """
        nodes = np.atleast_1d(np.asarray(nodes, dtype=int))
        xs = np.asarray(xs, dtype=float).reshape(nodes.size, self.problem.state_dim)
        pb = self.problem
        if self.method == "affine":
            z, lam = self._terminal_states(nodes, xs)
            vals = np.asarray(pb.cost(z), dtype=float)
            grads = np.einsum("bij,bj->bi", lam, pb.cost_grad(z))
            return vals, grads
        ref = self.reference

        def field(k, t, X):
            return ref.apply(pb.dynamics, k, t, X)

        def adjoint_action(k, t, X):
            J = ref.apply(pb.dynamics_jac_x, k, t, X)
            return lambda Y: np.einsum("bji,bj->bi", J, Y)

        def terminal(X):
            return pb.cost(X), pb.cost_grad(X)

        return pullback_batch(pb.horizon, nodes, xs, field, adjoint_action, terminal,
                              counter=self.counter)

    def value_and_gradient(self, k: int, x):
        vals, grads = self.batch([k], np.atleast_1d(np.asarray(x, dtype=float))[None, :])
        return float(vals[0]), grads[0]

    def value(self, k: int, x) -> float:
        """Cost reached from state ``x`` at node ``k`` under the reference control."""
        return self.value_and_gradient(k, x)[0]

    def gradient(self, k: int, x) -> np.ndarray:
        """Spatial gradient of :meth:`value`."""
        return self.value_and_gradient(k, x)[1]

    def along(self, trajectory: Trajectory) -> np.ndarray:
        """Gradients at every node of ``trajectory``; shape ``(nodes, n)``."""
        nodes = np.arange(trajectory.start, trajectory.stop + 1)
        return self.batch(nodes, trajectory.states)[1]

    def hessian_fd(self, k: int, x, rel_step: float = 1e-4) -> np.ndarray:
        """Hessian by central differences of :meth:`gradient`, symmetrized."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        n = x.size
        d = rel_step * (1.0 + np.linalg.norm(x))
        pts = np.vstack([x + d * np.eye(n), x - d * np.eye(n)])
        _, g = self.batch(np.full(2 * n, k), pts)
        H = (g[:n] - g[n:]) / (2.0 * d)
        return 0.5 * (H + H.T)


def super_adjoint(problem: ControlProblem, reference: AnyControl, k: int, x,
                  method: str = "auto") -> float:
    """One-shot evaluation of the super-adjoint value at node ``k``."""
    return SuperAdjoint(problem, reference, method=method).value(k, x)
