"""Feedback descent with a frozen super-adjoint, and a conditional-gradient baseline.

One outer iteration builds a comparison control by a sample-and-hold sweep:
at the start ``t_k`` of every block of ``sample_partition`` intervals, with the
state ``x_k`` reached so far, the control on the block minimizes the
Hamiltonian ``u -> psi_k . f(t_k, x_k, u)`` where ``psi_k`` is the gradient of
the reference super-adjoint at ``(t_k, x_k)``.  The exact increment formula
turns the pointwise minimization into a cost decrease certificate.

The sweep is written against a small model interface so the same code drives
ordinary and particle (mean-field) systems.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from ._io import write_csv
from .adjoint import SuperAdjoint
from .flow import IntegrationCounter, integrate_adjoint, integrate_flow
from .problem import AnyControl, Control, ControlProblem, RelaxedControl, convex_combination
from .variations import first_variation, interval_trapezoid, minimize_over, pmp_residual

__all__ = [
    "DescentConfig",
    "DescentRecord",
    "DescentTrace",
    "SweepResult",
    "OdeModel",
    "comparison_control",
    "solve",
    "baseline_gradient_solve",
]


@dataclass(frozen=True)
class DescentConfig:
    """Stopping and sampling parameters.

    Iteration stops once the cost decrease stays below ``cost_tol`` for
    ``stall_iters`` consecutive iterations, or after ``max_iters``.
    """

    max_iters: int = 50
    cost_tol: float = 1e-10
    stall_iters: int = 1
    sample_partition: int = 1
    track_residual: bool = True

    def __post_init__(self):
        if self.max_iters < 1 or self.stall_iters < 1 or self.sample_partition < 1:
            raise ValueError("max_iters, stall_iters and sample_partition must be positive")
        if not self.cost_tol > 0:
            raise ValueError("cost_tol must be positive")


@dataclass
class DescentRecord:
    iter: int
    cost: float
    predicted_decrease: float
    realized_decrease: float
    pmp_residual: float
    integrations_used: float
    accepted: bool
    step: str


@dataclass
class DescentTrace:
    """Per-iteration history of a descent run."""

    initial_cost: float
    records: List[DescentRecord] = field(default_factory=list)
    stop_reason: str = ""

    @property
    def costs(self) -> np.ndarray:
        return np.array([self.initial_cost] + [r.cost for r in self.records])

    @property
    def final_cost(self) -> float:
        return float(self.costs.min())

    @property
    def iterations(self) -> int:
        return len(self.records)

    @property
    def integrations(self) -> float:
        return self.records[-1].integrations_used if self.records else 0.0

    def to_dict(self) -> dict:
        return {
            "initial_cost": self.initial_cost,
            "stop_reason": self.stop_reason,
            "records": [asdict(r) for r in self.records],
        }

    def to_csv(self, path) -> None:
        header = ["iter", "cost", "predicted", "realized", "residual", "integrations_used",
                  "accepted", "step"]
        rows = ([r.iter, r.cost, r.predicted_decrease, r.realized_decrease, r.pmp_residual,
                 r.integrations_used, int(r.accepted), r.step] for r in self.records)
        write_csv(path, header, rows)


@dataclass
class SweepResult:
    """Output of one sample-and-hold sweep."""

    control: Control
    path: np.ndarray
    covectors: np.ndarray
    contributions: np.ndarray

    @property
    def predicted_increment(self) -> float:
        return float(np.sum(self.contributions))


class OdeModel:
    """Adapter exposing a :class:`ControlProblem` to the generic sweep."""

    def __init__(self, problem: ControlProblem, counter: IntegrationCounter, sa_method: str = "auto"):
        self.problem = problem
        self.counter = counter
        self.grid = problem.horizon
        self.control_set = problem.control_set
        self.initial_state = problem.x0
        self.sa_method = sa_method

    def path(self, control: AnyControl, start: int, stop: int, state0) -> np.ndarray:
        return integrate_flow(self.problem, control, state0, start, stop, counter=self.counter).states

    def cost(self, state) -> float:
        return float(self.problem.cost(state))

    def super_adjoint(self, reference: AnyControl, reference_path=None):
        traj = None
        if reference_path is not None:
            from .flow import Trajectory
            traj = Trajectory(self.grid, reference_path)
        return SuperAdjoint(self.problem, reference, method=self.sa_method, counter=self.counter,
                            reference_trajectory=traj)

    def terminal_covector(self, state) -> np.ndarray:
        return np.asarray(self.problem.cost_grad(state), dtype=float)

    def hamiltonian_fn(self, t: float, state, covector):
        f = self.problem.dynamics
        return lambda U: f(t, state, U) @ covector

    def pairing(self, control: AnyControl, k: int, t: float, state, covector) -> float:
        return float(covector @ self.problem.field(control, k, t, state))

    def residual(self, control: AnyControl) -> float:
        return pmp_residual(self.problem, control).residual


def _reference_values(reference: AnyControl):
    return reference.values if isinstance(reference, Control) else None


def _initial_guess(model, reference: AnyControl) -> np.ndarray:
    ref = _reference_values(reference)
    if ref is not None:
        return ref.copy()
    cs = model.control_set
    fill = cs.center if hasattr(cs, "center") else cs.atoms[0]
    return np.tile(fill, (model.grid.n_steps, 1))


def _decide(model, k: int, state, covector, ref_values, tol: float):
    t = model.grid.time(k)
    ref = None if ref_values is None else ref_values[k]
    u, _ = minimize_over(model.hamiltonian_fn(t, state, covector), model.control_set, ref, tol)
    return u


def _contributions(model, candidate: Control, reference: AnyControl, path, covectors) -> np.ndarray:
    grid = model.grid
    out = np.empty(grid.n_steps)
    for k in range(grid.n_steps):
        t0, t1 = grid.time(k), grid.time(k) + grid.h
        left = (model.pairing(candidate, k, t0, path[k], covectors[k])
                - model.pairing(reference, k, t0, path[k], covectors[k]))
        right = (model.pairing(candidate, k, t1, path[k + 1], covectors[k + 1])
                 - model.pairing(reference, k, t1, path[k + 1], covectors[k + 1]))
        out[k] = 0.5 * grid.h * (left + right)
    return out


def _sweep(model, reference: AnyControl, stride: int = 1, strategy: str = "auto",
           reference_path=None, tol: float = 1e-12, window: int = 64) -> SweepResult:
    grid = model.grid
    n = grid.n_steps
    sa = model.super_adjoint(reference, reference_path)
    if strategy == "auto":
        strategy = "sequential" if getattr(sa, "cheap", False) else "speculative"
    if strategy not in ("sequential", "speculative"):
        raise ValueError(f"unknown sweep strategy {strategy!r}")
    ref_values = _reference_values(reference)
    values = _initial_guess(model, reference)
    blocks = np.arange(0, n, stride)
    state0 = np.asarray(model.initial_state, dtype=float)
    covectors = np.empty((n + 1,) + state0.shape)
    have = np.zeros(n + 1, dtype=bool)

    # while decisions agree with an ordinary reference the states are known
    reuse = ref_values is not None and reference_path is not None
    if strategy == "sequential":
        path = np.empty((n + 1,) + state0.shape)
        path[0] = state0
        on_reference = reuse
        for k in blocks:
            stop = min(k + stride, n)
            _, g = sa.batch([k], path[k][None])
            covectors[k] = g[0]
            have[k] = True
            values[k:stop] = _decide(model, k, path[k], g[0], ref_values, tol)
            if on_reference and np.array_equal(values[k:stop], ref_values[k:stop]):
                path[k + 1:stop + 1] = reference_path[k + 1:stop + 1]
                continue
            on_reference = False
            path[k:stop + 1] = model.path(Control(grid, values), k, stop, path[k])
    else:
        if reuse:
            path = np.array(reference_path, dtype=float)
        else:
            path = model.path(Control(grid, values), 0, n, state0)
        lock = 0
        span = min(8, window)
        while lock < blocks.size:
            nodes = blocks[lock:lock + span]
            _, g = sa.batch(nodes, path[nodes])
            mismatch = None
            for i, k in enumerate(nodes):
                u = _decide(model, k, path[k], g[i], ref_values, tol)
                stop = min(k + stride, n)
                if mismatch is None:
                    covectors[k] = g[i]
                    have[k] = True
                    if not np.array_equal(u, values[k]):
                        mismatch = i
                values[k:stop] = u
            if mismatch is None:
                lock += nodes.size
                span = min(2 * span, window)
                continue
            k_m = nodes[mismatch]
            path[k_m:] = model.path(Control(grid, values), k_m, n, path[k_m])
            lock += mismatch + 1
            # speculate about as far as the last guess held
            span = int(min(max(2, 2 * mismatch), window))

    covectors[n] = model.terminal_covector(path[n])
    have[n] = True
    missing = np.flatnonzero(~have)
    if missing.size:
        _, g = sa.batch(missing, path[missing])
        covectors[missing] = g
    candidate = Control(grid, values)
    contrib = _contributions(model, candidate, reference, path, covectors)
    return SweepResult(candidate, path, covectors, contrib)


def comparison_control(problem: ControlProblem, reference: AnyControl,
                       config: DescentConfig = DescentConfig(), strategy: str = "auto",
                       counter: Optional[IntegrationCounter] = None):
    """Sample-and-hold feedback control for a frozen reference.

    ``strategy="sequential"`` queries the super-adjoint once per block in
    order.  ``"speculative"`` integrates a guessed control, evaluates all
    remaining block queries in one batched pass and locks the prefix up to the
    first block whose decision differs from the guess; it returns the same
    control with far fewer passes.  ``"auto"`` picks sequential when single
    queries are free (state-affine problems).

    Returns
    -------
    control : Control
    trajectory : Trajectory
    """
    from .flow import Trajectory

    counter = counter if counter is not None else IntegrationCounter()
    model = OdeModel(problem, counter)
    res = _sweep(model, reference, config.sample_partition, strategy)
    return res.control, Trajectory(problem.horizon, res.path)


def _prefix_candidate(model, reference: AnyControl, sweep: SweepResult):
    """Switch from the comparison control back to the reference at the best node.

    The exact increment of this concatenation is the partial sum of the
    certificate up to the switching node, so the most negative partial sum is
    the best guaranteed decrease.
    """
    partial = np.cumsum(sweep.contributions)
    s = int(np.argmin(partial)) + 1
    if partial[s - 1] >= 0 or s == model.grid.n_steps:
        return None
    grid = model.grid
    if isinstance(reference, Control):
        vals = reference.values.copy()
        vals[:s] = sweep.control.values[:s]
        cand = Control(grid, vals)
    else:
        atoms = np.unique(np.vstack([reference.atoms, sweep.control.values[:s]]), axis=0)
        weights = np.zeros((grid.n_steps, atoms.shape[0]))
        for k in range(grid.n_steps):
            if k < s:
                j = int(np.flatnonzero(np.all(atoms == sweep.control.values[k], axis=1))[0])
                weights[k, j] = 1.0
            else:
                for a, w in zip(reference.atoms, reference.weights[k]):
                    if w:
                        j = int(np.flatnonzero(np.all(atoms == a, axis=1))[0])
                        weights[k, j] += w
        cand = RelaxedControl(grid, atoms, weights)
    tail = model.path(cand, s, grid.n_steps, sweep.path[s])
    path = np.concatenate([sweep.path[:s], tail])
    return cand, path, float(partial[s - 1])


def descend(model, u_init: AnyControl, config: DescentConfig, strategy: str = "auto"):
    """Generic monotone feedback-descent loop over a model adapter."""
    grid = model.grid
    counter = model.counter
    u = u_init
    path = model.path(u, 0, grid.n_steps, model.initial_state)
    J = model.cost(path[-1])
    trace = DescentTrace(initial_cost=J)
    stall = 0
    for it in range(1, config.max_iters + 1):
        sweep = _sweep(model, u, config.sample_partition, strategy, reference_path=path)
        Jc = model.cost(sweep.path[-1])
        predicted = -sweep.predicted_increment
        step = "feedback"
        accepted = Jc <= J
        new_u, new_path = sweep.control, sweep.path
        if not accepted:
            fallback = _prefix_candidate(model, u, sweep)
            if fallback is not None:
                cand, cpath, partial = fallback
                Jf = model.cost(cpath[-1])
                if Jf <= J:
                    accepted, step = True, "prefix"
                    new_u, new_path, Jc, predicted = cand, cpath, Jf, -partial
        if not accepted:
            resid = model.residual(u) if config.track_residual else float("nan")
            trace.records.append(DescentRecord(it, J, predicted, 0.0, resid, counter.passes,
                                               False, "rejected"))
            trace.stop_reason = "no-progress"
            break
        decrease = J - Jc
        u, path, J = new_u, new_path, Jc
        resid = model.residual(u) if config.track_residual else float("nan")
        trace.records.append(DescentRecord(it, J, predicted, decrease, resid, counter.passes,
                                           True, step))
        stall = stall + 1 if decrease < config.cost_tol else 0
        if stall >= config.stall_iters:
            trace.stop_reason = "converged"
            break
    else:
        trace.stop_reason = "max-iters"
    return u, trace


def solve(problem: ControlProblem, u_init: AnyControl, config: DescentConfig = DescentConfig(),
          counter: Optional[IntegrationCounter] = None, strategy: str = "auto"):
    """Iterate feedback comparison controls until the cost stops decreasing.

    A candidate that would raise the cost is never accepted: the sweep is
    first cut back to the prefix with the most negative certified increment,
    and if that fails too the run stops with ``stop_reason="no-progress"``.

    Returns
    -------
    control : Control or RelaxedControl
        The best (lowest-cost) iterate.
    trace : DescentTrace
    """
    problem.check_control(u_init)
    counter = counter if counter is not None else IntegrationCounter()
    return descend(OdeModel(problem, counter), u_init, config, strategy)


def baseline_gradient_solve(problem: ControlProblem, u_init: AnyControl,
                            config: DescentConfig = DescentConfig(),
                            counter: Optional[IntegrationCounter] = None,
                            armijo: float = 1e-4, max_halvings: int = 30):
    """Conditional-gradient method on relaxed controls.

    The direction minimizes the first variation with state and costate frozen
    along the current trajectory; the step ``eps`` in
    ``u + eps (v - u)`` is found by Armijo backtracking from ``eps = 1``.
    """
    problem.check_control(u_init)
    counter = counter if counter is not None else IntegrationCounter()
    grid = problem.horizon
    u = u_init
    traj = integrate_flow(problem, u, counter=counter)
    J = float(problem.cost(traj.final))
    trace = DescentTrace(initial_cost=J)
    stall = 0
    for it in range(1, config.max_iters + 1):
        p = integrate_adjoint(problem, u, traj, counter=counter)
        ref_vals = _reference_values(u)
        vals = np.empty((grid.n_steps, problem.control_dim))
        for k in range(grid.n_steps):
            x, psi, t = traj.at(k), p.at(k), grid.time(k)
            ref = None if ref_vals is None else ref_vals[k]
            vals[k], _ = minimize_over(lambda U: problem.dynamics(t, x, U) @ psi,
                                       problem.control_set, ref)
        direction = Control(grid, vals)
        slope = first_variation(problem, u, direction, trajectory=traj, costate=p)
        if not slope < -1e-15 * max(1.0, abs(J)):
            trace.stop_reason = "stationary"
            break
        eps = 1.0
        accepted = False
        for _ in range(max_halvings + 1):
            cand = convex_combination(u, direction, eps)
            ctraj = integrate_flow(problem, cand, counter=counter)
            Jc = float(problem.cost(ctraj.final))
            if Jc <= J + armijo * eps * slope:
                accepted = True
                break
            eps *= 0.5
        if not accepted:
            trace.records.append(DescentRecord(it, J, -eps * slope, 0.0, float("nan"),
                                               counter.passes, False, "rejected"))
            trace.stop_reason = "no-progress"
            break
        decrease = J - Jc
        u, traj, J = cand, ctraj, Jc
        resid = pmp_residual(problem, u).residual if config.track_residual else float("nan")
        trace.records.append(DescentRecord(it, J, -eps * slope, decrease, resid, counter.passes,
                                           True, f"eps={eps:g}"))
        stall = stall + 1 if decrease < config.cost_tol else 0
        if stall >= config.stall_iters:
            trace.stop_reason = "converged"
            break
    else:
        trace.stop_reason = "max-iters"
    return u, trace
