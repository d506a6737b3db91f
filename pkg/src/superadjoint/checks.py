"""Invariant battery run by ``superadjoint check``.

Every check returns a :class:`CheckResult` holding the measured quantity, the
tolerance it is held to and the verdict.  Random controls and probe vectors
come from a generator seeded by the scenario seed, so reruns are identical.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import List

import numpy as np

from .adjoint import SuperAdjoint
from .flow import integrate_adjoint, integrate_flow, integrate_riccati, integrate_variational
from .meanfield import (
    MeanFieldProblem,
    MeanFieldSuperAdjoint,
    check_flat_gradient,
    check_measure_contractions,
    check_measure_derivative,
    lift_adjoint,
    mf_exact_increment,
    particle_flow,
    pushforward_tangent,
)
from .problem import ControlProblem, check_cost_gradient, check_dynamics_jacobian, convex_combination
from .scenarios import random_block_control
from .variations import exact_increment, first_variation, second_variation

PAIRS = 10
RICCATI_NODES = 5
TAYLOR_EPS = np.logspace(-1, -3, 5)

# tolerances
INCREMENT_TOL_AT_1000 = 1e-6
REFINEMENT_RATIO = 3.0
GRADIENT_TOL = 1e-8
DUALITY_TOL = 1e-9
RICCATI_TOL = 1e-3
PAIRING_TOL = 1e-9
TAYLOR_SLOPE = 2.7
# remainders this small mean the cost is exactly quadratic in eps
TAYLOR_FLOOR = 1e-13
# the fit runs on at least this many intervals so quadrature error stays below the floor
TAYLOR_MIN_STEPS = 400
DERIVATIVE_TOL = 1e-5
MF_INCREMENT_TOL = 1e-5
MF_PAIRING_TOL = 1e-7
MF_DUALITY_TOL = 1e-8


@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: float
    passed: bool
    relation: str = "<="

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _le(name, value, tol) -> CheckResult:
    value = float(value)
    return CheckResult(name, value, tol, bool(np.isfinite(value) and value <= tol), "<=")


def _ge(name, value, tol) -> CheckResult:
    value = float(value)
    return CheckResult(name, value, tol, bool(np.isfinite(value) and value >= tol), ">=")


def inject(problem, fault: str):
    """Return a copy of ``problem`` with a deliberate defect (for testing the battery)."""
    if fault != "grad_bug":
        raise ValueError(f"unknown fault {fault!r}; known: grad_bug")
    if isinstance(problem, MeanFieldProblem):
        good = problem.flat_gradient
        return dataclasses.replace(problem, flat_gradient=lambda P: 1.1 * np.asarray(good(P)) + 0.05)
    good = problem.cost_grad
    return dataclasses.replace(problem, cost_grad=lambda x: 1.1 * np.asarray(good(x)) + 0.05)


def _pairs(problem, rng, count=PAIRS):
    return [(random_block_control(problem.horizon, problem.control_set, rng),
             random_block_control(problem.horizon, problem.control_set, rng)) for _ in range(count)]


def _increment_gaps(problem, pairs):
    return np.array([exact_increment(problem, a, b).abs_gap for a, b in pairs])


def taylor_remainders(problem: ControlProblem, reference, target, eps=TAYLOR_EPS):
    """Second-order Taylor remainders of the cost along ``u_ref + eps (u - u_ref)``.

    Returns ``(remainders, reference_cost)``.
    """
    traj = integrate_flow(problem, reference)
    p = integrate_adjoint(problem, reference, traj)
    v1 = first_variation(problem, reference, target, trajectory=traj, costate=p, quadrature="simpson")
    v2 = second_variation(problem, reference, target, quadrature="simpson")
    j0 = float(problem.cost(traj.final))
    rem = []
    for e in eps:
        je = float(problem.cost(integrate_flow(problem, convex_combination(reference, target, e)).final))
        rem.append(abs(je - j0 - e * v1 - e * e * v2))
    return np.array(rem), j0


def taylor_slope(problem: ControlProblem, reference, target, eps=TAYLOR_EPS) -> float:
    """Fitted exponent of the second-order Taylor remainder of the cost."""
    rem, _ = taylor_remainders(problem, reference, target, eps)
    return float(np.polyfit(np.log(eps), np.log(rem), 1)[0])


def taylor_check(problem: ControlProblem, reference, target) -> CheckResult:
    grid = problem.horizon
    factor = -(-TAYLOR_MIN_STEPS // grid.n_steps)
    if factor > 1:
        fine = grid.with_steps(factor * grid.n_steps)
        problem = problem.with_horizon(fine)
        reference, target = reference.on_grid(fine), target.on_grid(fine)
    rem, j0 = taylor_remainders(problem, reference, target)
    floor = TAYLOR_FLOOR * max(1.0, abs(j0))
    if rem.max() <= floor:
        # no third-order term to fit: the expansion is exact up to roundoff
        return _le("Taylor remainder (exactly quadratic)", rem.max(), floor)
    slope = float(np.polyfit(np.log(TAYLOR_EPS), np.log(np.maximum(rem, 1e-300)), 1)[0])
    return _ge("Taylor remainder exponent", slope, TAYLOR_SLOPE)


def classical_checks(problem: ControlProblem, seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    grid = problem.horizon
    n = problem.state_dim
    out = []

    reference = random_block_control(grid, problem.control_set, rng)
    traj = integrate_flow(problem, reference)
    base = traj.states[np.linspace(0, grid.n_steps, 9).astype(int)]
    probes = base + 0.1 * rng.standard_normal(base.shape)
    _, worst_g = check_cost_gradient(problem, probes)
    out.append(_le("cost gradient vs finite differences", worst_g, 1e-5))
    cs = problem.control_set
    samples = np.vstack([cs.lower, cs.upper, cs.center]) if hasattr(cs, "lower") else cs.atoms
    _, worst_j = check_dynamics_jacobian(problem, probes[:4], samples)
    out.append(_le("dynamics Jacobian vs finite differences", worst_j, 1e-5))

    pairs = _pairs(problem, rng)
    gaps = _increment_gaps(problem, pairs)
    tol = INCREMENT_TOL_AT_1000 * (1000.0 / grid.n_steps) ** 2
    out.append(_le("exact increment gap", gaps.max(), tol))
    fine = problem.with_horizon(grid.with_steps(2 * grid.n_steps))
    gaps_fine = _increment_gaps(fine, [(a.on_grid(fine.horizon), b.on_grid(fine.horizon)) for a, b in pairs])
    resolved = gaps > 1e-12
    ratio = np.min(gaps[resolved] / np.maximum(gaps_fine[resolved], 1e-300)) if resolved.any() else np.inf
    out.append(_ge("increment gap ratio on doubling", ratio, REFINEMENT_RATIO))

    sa = SuperAdjoint(problem, reference, reference_trajectory=traj)
    values, grads = sa.batch(np.arange(grid.node_count), traj.states)
    p = integrate_adjoint(problem, reference, traj)
    out.append(_le("super-adjoint gradient vs costate", np.abs(grads - p.states).max(), GRADIENT_TOL))
    out.append(_le("duality constancy (relative spread)",
                   np.std(values) / max(abs(np.mean(values)), 1e-300), DUALITY_TOL))

    if problem.cost_hess is not None:
        ric = integrate_riccati(problem, reference, traj, p)
        worst = 0.0
        for k in np.linspace(0, grid.n_steps, RICCATI_NODES).astype(int):
            fd = sa.hessian_fd(int(k), traj.at(int(k)))
            q = -ric.at(int(k))
            worst = max(worst, np.linalg.norm(q - fd) / max(np.linalg.norm(fd), 1e-12))
        out.append(_le("Riccati matrix vs finite-difference Hessian", worst, RICCATI_TOL))

    drift = 0.0
    for _ in range(PAIRS):
        w = integrate_variational(problem, reference, traj, rng.standard_normal(n))
        lam = integrate_adjoint(problem, reference, traj, terminal=rng.standard_normal(n)).states
        pairing = np.einsum("ka,ka->k", w, lam)
        drift = max(drift, np.abs(pairing - pairing[0]).max() / max(abs(pairing[0]), 1.0))
    out.append(_le("tangent/costate pairing drift", drift, PAIRING_TOL))

    if problem.cost_hess is not None:
        out.append(taylor_check(problem, *pairs[0]))
    return out


def mean_field_checks(mfp: MeanFieldProblem, seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    grid = mfp.horizon
    P0 = mfp.ensemble0
    out = []
    cs = mfp.control_set
    u = cs.center if hasattr(cs, "center") else cs.atoms[0]
    sub = P0[: min(P0.shape[0], 40)]
    out.append(_le("flat gradient vs finite differences", check_flat_gradient(mfp, sub)[1], DERIVATIVE_TOL))
    out.append(_le("measure derivative vs finite differences",
                   check_measure_derivative(mfp, grid.t0, sub, u)[1], DERIVATIVE_TOL))
    out.append(_le("structured contractions vs dense kernel",
                   check_measure_contractions(mfp, grid.t0, P0, u, rng)[1], 1e-12))

    reference = random_block_control(grid, cs, rng)
    target = random_block_control(grid, cs, rng)
    out.append(_le("mean-field exact increment gap", mf_exact_increment(mfp, reference, target).abs_gap,
                   MF_INCREMENT_TOL))

    path = particle_flow(mfp, reference)
    sa = MeanFieldSuperAdjoint(mfp, reference)
    values, grads = sa.batch(np.arange(grid.node_count), path.points)
    lifted = lift_adjoint(mfp, reference, path)
    out.append(_le("super-adjoint gradient vs lifted costate", np.abs(grads - lifted.covectors).max(),
                   GRADIENT_TOL))
    out.append(_le("duality constancy (relative spread)",
                   np.std(values) / max(abs(np.mean(values)), 1e-300), MF_DUALITY_TOL))

    drift = 0.0
    for _ in range(PAIRS):
        W = pushforward_tangent(mfp, reference, path, rng.standard_normal(P0.shape))
        Y = lift_adjoint(mfp, reference, path, terminal=rng.standard_normal(P0.shape)).covectors
        pairing = np.einsum("kia,kia->k", W, Y) / P0.shape[0]
        drift = max(drift, np.abs(pairing - pairing[0]).max() / max(abs(pairing[0]), 1.0))
    out.append(_le("tangent/costate pairing drift", drift, MF_PAIRING_TOL))
    return out


def run_checks(problem, seed: int = 0) -> List[CheckResult]:
    if isinstance(problem, MeanFieldProblem):
        return mean_field_checks(problem, seed)
    return classical_checks(problem, seed)


def format_table(results: List[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  {'value':>12}     {'tolerance':>9}  result"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.value:12.4e}  {r.relation} {r.tolerance:9.2e}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines) + "\n"
