"""Exact increment formulas, super-adjoints and feedback descent for Mayer problems."""

from __future__ import annotations

from .adjoint import SuperAdjoint, super_adjoint
from .descent import (
    DescentConfig,
    DescentTrace,
    baseline_gradient_solve,
    comparison_control,
    solve,
)
from .config import Scenario, load_scenario, parse_scenario
from .errors import (
    ConfigError,
    DimensionMismatch,
    MissingHessian,
    NonFiniteState,
    SuperAdjointError,
    ValueNotAnAtom,
)
from .flow import (
    Costate,
    IntegrationCounter,
    RiccatiPath,
    Trajectory,
    integrate_adjoint,
    integrate_flow,
    integrate_linearized,
    integrate_riccati,
    integrate_variational,
)
from .meanfield import (
    EnsemblePath,
    LiftedEnsemble,
    MeanFieldProblem,
    MeanFieldSuperAdjoint,
    ParticleEnsemble,
    lift_adjoint,
    mf_descent,
    mf_exact_increment,
    mf_pmp_residual,
    mf_super_adjoint_gradient,
    particle_flow,
    pushforward_tangent,
    wasserstein2_1d,
)
from .problem import (
    Atoms,
    Box,
    Control,
    ControlProblem,
    RelaxedControl,
    TimeGrid,
    convex_combination,
    mean_field_value,
    relax,
)
from .variations import (
    IncrementReport,
    PmpReport,
    exact_increment,
    first_variation,
    hamiltonian,
    minimize_hamiltonian,
    pmp_residual,
    second_variation,
)

__version__ = "0.1.0"
