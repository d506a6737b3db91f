"""Exception types raised by the solvers."""


class SuperAdjointError(Exception):
    """Base class for all package errors."""


class ValueNotAnAtom(SuperAdjointError, ValueError):
    """A control value is not present in the atom list."""


class NonFiniteState(SuperAdjointError, ArithmeticError):
    """An integrator stage produced NaN or Inf."""


class MissingHessian(SuperAdjointError):
    """A second-order routine was called on a problem without ``cost_hess``."""


class DimensionMismatch(SuperAdjointError, ValueError):
    """Array shapes are inconsistent with the problem dimensions."""


class ConfigError(SuperAdjointError):
    """A scenario file is missing, unreadable or malformed."""
