"""Built-in scenarios and helpers for random test controls.

Each builder takes the grid, control set, initial state and a parameter dict
(values from the ``[params]`` section of a config file) and returns a problem.
"""

from __future__ import annotations

from typing import Callable, Dict, Optional

import numpy as np

from .problem import Box, Control, ControlProblem, ControlSet, TimeGrid

__all__ = [
    "REGISTRY",
    "build",
    "linear_scalar",
    "double_integrator",
    "bilinear",
    "van_der_pol",
    "default_problem",
    "random_block_control",
    "MF_REGISTRY",
    "build_mean_field",
    "default_mean_field",
    "gaussian_ensemble",
    "grid_ensemble",
    "steering",
    "steering_optimum",
    "kuramoto",
]


def _vec(params, key, default):
    v = params.get(key, default)
    return np.atleast_1d(np.asarray(v, dtype=float))


def _quadratic_cost(target, weight=1.0):
    target = np.asarray(target, dtype=float)

    def cost(x):
        d = np.asarray(x) - target
        return weight * np.sum(d * d, axis=-1)

    def grad(x):
        return 2.0 * weight * (np.asarray(x) - target)

    def hess(x):
        x = np.asarray(x)
        n = target.size
        return np.broadcast_to(2.0 * weight * np.eye(n), x.shape[:-1] + (n, n)).copy()

    return cost, grad, hess


def linear_scalar(grid: TimeGrid, control_set: ControlSet, x0, params: Optional[dict] = None
                  ) -> ControlProblem:
    """``x' = a x + b u`` with cost ``weight * (x(T) - target)^2``."""
    params = params or {}
    a = float(params.get("a", -1.0))
    b = float(params.get("b", 1.0))
    target = _vec(params, "target", [0.5])
    cost, grad, hess = _quadratic_cost(target, float(params.get("weight", 0.5)))

    def f(t, x, u):
        return a * np.asarray(x) + b * np.asarray(u)

    def jac(t, x, u):
        x = np.asarray(x)
        shape = np.broadcast_shapes(x.shape[:-1], np.shape(u)[:-1])
        return np.full(shape + (1, 1), a)

    return ControlProblem(1, 1, f, jac, cost, grad, control_set, grid, x0, cost_hess=hess,
                          state_affine=True, name="linear-scalar")


def double_integrator(grid: TimeGrid, control_set: ControlSet, x0, params: Optional[dict] = None
                      ) -> ControlProblem:
    """``x1' = x2, x2' = u`` with cost ``|x(T) - target|^2``."""
    params = params or {}
    target = _vec(params, "target", [0.25, 0.4])
    cost, grad, hess = _quadratic_cost(target, float(params.get("weight", 1.0)))
    A = np.array([[0.0, 1.0], [0.0, 0.0]])

    def f(t, x, u):
        x, u = np.asarray(x), np.asarray(u)
        shape = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        out = np.empty(shape + (2,))
        out[..., 0] = x[..., 1]
        out[..., 1] = u[..., 0]
        return out

    def jac(t, x, u):
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1])
        return np.broadcast_to(A, shape + (2, 2)).copy()

    return ControlProblem(2, 1, f, jac, cost, grad, control_set, grid, x0, cost_hess=hess,
                          state_affine=True, name="double-integrator")


ROTATION = np.array([[0.0, -1.0], [1.0, 0.0]])
SQUEEZE = np.array([[1.0, 0.0], [0.0, -1.0]])


def bilinear(grid: TimeGrid, control_set: ControlSet, x0, params: Optional[dict] = None
             ) -> ControlProblem:
    """``x' = (u1 R + u2 S) x`` with a rotation generator ``R`` and a squeeze ``S``.

    With a one-dimensional control only the rotation is used.
    """
    params = params or {}
    target = _vec(params, "target", [-1.5, 1.5])
    cost, grad, hess = _quadratic_cost(target, float(params.get("weight", 1.0)))
    gens = np.stack([ROTATION, SQUEEZE])[: control_set.dim]

    def matrix(u):
        return np.einsum("...j,jab->...ab", np.asarray(u, dtype=float), gens)

    def f(t, x, u):
        return np.einsum("...ab,...b->...a", matrix(u), np.asarray(x, dtype=float))

    def jac(t, x, u):
        M = matrix(u)
        shape = np.broadcast_shapes(np.shape(x)[:-1], M.shape[:-2])
        return np.broadcast_to(M, shape + (2, 2)).copy()

    return ControlProblem(2, control_set.dim, f, jac, cost, grad, control_set, grid, x0,
                          cost_hess=hess, state_affine=True, name="bilinear")


def van_der_pol(grid: TimeGrid, control_set: ControlSet, x0, params: Optional[dict] = None
                ) -> ControlProblem:
    """Controlled Van der Pol oscillator ``x1' = x2, x2' = -x1 + mu (1 - x1^2) x2 + u``.

    The cost ``0.5 |x(T) - target|^2 + 0.25 kappa x1(T)^4`` adds a quartic term so
    that the cost Hessian is state dependent.
    """
    params = params or {}
    mu = float(params.get("mu", 1.0))
    kappa = float(params.get("kappa", 1.0))
    target = _vec(params, "target", [0.0, 0.0])

    def f(t, x, u):
        x, u = np.asarray(x), np.asarray(u)
        shape = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        out = np.empty(shape + (2,))
        x1, x2 = x[..., 0], x[..., 1]
        out[..., 0] = x2
        out[..., 1] = -x1 + mu * (1.0 - x1 * x1) * x2 + u[..., 0]
        return out

    def jac(t, x, u):
        x = np.asarray(x)
        shape = np.broadcast_shapes(x.shape[:-1], np.shape(u)[:-1])
        x1, x2 = x[..., 0], x[..., 1]
        out = np.zeros(shape + (2, 2))
        out[..., 0, 1] = 1.0
        out[..., 1, 0] = -1.0 - 2.0 * mu * x1 * x2
        out[..., 1, 1] = mu * (1.0 - x1 * x1)
        return out

    def cost(x):
        x = np.asarray(x)
        d = x - target
        return 0.5 * np.sum(d * d, axis=-1) + 0.25 * kappa * x[..., 0] ** 4

    def grad(x):
        x = np.asarray(x)
        g = x - target
        g = g.copy()
        g[..., 0] += kappa * x[..., 0] ** 3
        return g

    def hess(x):
        x = np.asarray(x)
        out = np.broadcast_to(np.eye(2), x.shape[:-1] + (2, 2)).copy()
        out[..., 0, 0] += 3.0 * kappa * x[..., 0] ** 2
        return out

    return ControlProblem(2, 1, f, jac, cost, grad, control_set, grid, x0, cost_hess=hess,
                          name="van-der-pol")


REGISTRY: Dict[str, Callable[..., ControlProblem]] = {
    "linear-scalar": linear_scalar,
    "double-integrator": double_integrator,
    "bilinear": bilinear,
    "van-der-pol": van_der_pol,
}

DEFAULTS = {
    "linear-scalar": dict(T=1.0, lower=[-1.0], upper=[1.0], x0=[1.0]),
    "double-integrator": dict(T=1.0, lower=[-1.0], upper=[1.0], x0=[0.0, 0.0]),
    "bilinear": dict(T=1.0, lower=[-1.0, -1.0], upper=[1.0, 1.0], x0=[1.0, 0.5]),
    "van-der-pol": dict(T=1.0, lower=[-1.0], upper=[1.0], x0=[1.0, 0.0]),
}


def build(name: str, grid: TimeGrid, control_set: ControlSet, x0, params: Optional[dict] = None
          ) -> ControlProblem:
    try:
        builder = REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}; known: {', '.join(sorted(REGISTRY))}") from None
    return builder(grid, control_set, x0, params)


def default_problem(name: str, n_steps: int = 400, params: Optional[dict] = None) -> ControlProblem:
    """A registry scenario with its default horizon, box and initial state."""
    d = DEFAULTS[name]
    grid = TimeGrid(0.0, d["T"], n_steps)
    return build(name, grid, Box(d["lower"], d["upper"]), d["x0"], params)


def random_block_control(grid: TimeGrid, control_set: ControlSet, rng: np.random.Generator,
                         blocks: int = 10) -> Control:
    """Random piecewise-constant control on ``blocks`` equal time blocks.

    The block values do not depend on ``grid.n_steps``, so the same generator
    state yields the same control function on every refinement.
    """
    if isinstance(control_set, Box):
        vals = rng.uniform(control_set.lower, control_set.upper, size=(blocks, control_set.dim))
    else:
        vals = control_set.atoms[rng.integers(0, control_set.atoms.shape[0], size=blocks)]
    span = grid.T - grid.t0

    def fn(t):
        j = min(int((t - grid.t0) / span * blocks), blocks - 1)
        return vals[j]

    return Control.from_function(grid, fn)


# mean-field scenarios ------------------------------------------------------

def steering(grid: TimeGrid, control_set: ControlSet, ensemble0, params: Optional[dict] = None):
    """``F(x, mu, u) = u - (x - mean(mu))`` with cost ``int |x - target|^2 dmu``.

    The mean moves with velocity ``u`` while deviations from it decay like
    ``exp(-t)``, so the optimal cost is ``var0 * exp(-2 T)`` whenever the target
    is reachable by the mean.
    """
    from .meanfield import MeanFieldProblem

    params = params or {}
    n = control_set.dim
    target = np.broadcast_to(_vec(params, "target", [0.5]), (n,)).copy()
    eye = np.eye(n)

    def field(t, P, u):
        P = np.asarray(P)
        u = np.asarray(u, dtype=float)[..., None, :]
        return u - (P - P.mean(axis=-2, keepdims=True))

    def jac_x(t, P, u):
        shape = np.broadcast_shapes(np.shape(P)[:-1], np.shape(u)[:-1] + (1,))
        return np.broadcast_to(-eye, shape + (n, n)).copy()

    def jac_measure(t, P, u):
        N = np.shape(P)[-2]
        shape = np.broadcast_shapes(np.shape(P)[:-2], np.shape(u)[:-1])
        return np.broadcast_to(eye, shape + (N, N, n, n)).copy()

    def mean_contraction(t, P, W, u):
        out = np.broadcast_to(np.asarray(W).mean(axis=-2, keepdims=True), np.shape(W))
        return np.broadcast_to(out, np.broadcast_shapes(np.shape(W), np.shape(u)[:-1] + (1, 1))).copy()

    def cost(P):
        d = np.asarray(P) - target
        return np.mean(np.sum(d * d, axis=-1), axis=-1)

    def flat_gradient(P):
        return 2.0 * (np.asarray(P) - target)

    return MeanFieldProblem(n, n, field, jac_x, jac_measure, cost, flat_gradient, control_set,
                            grid, ensemble0, measure_jvp=mean_contraction,
                            measure_vjp=mean_contraction, name="steering")


def steering_optimum(ensemble0, grid: TimeGrid) -> float:
    """Optimal steering cost when the target is reachable by the mean."""
    P = np.asarray(ensemble0, dtype=float)
    var0 = float(np.mean(np.sum((P - P.mean(axis=0)) ** 2, axis=-1)))
    return var0 * np.exp(-2.0 * (grid.T - grid.t0))


def kuramoto(grid: TimeGrid, control_set: ControlSet, ensemble0, params: Optional[dict] = None):
    """Phase interaction ``F(x, mu, u) = u - kappa int sin(x - y) dmu(y)`` in one dimension.

    Cost ``0.5 int (x - center)^2 dmu + 0.5 lam (int sin x dmu)^2``.  The kernel
    ``kappa cos(x_i - x_j)`` has rank two, so the contractions cost ``O(N)``.
    """
    from .meanfield import MeanFieldProblem

    params = params or {}
    kappa = float(params.get("kappa", 1.0))
    lam = float(params.get("lam", 1.0))
    center = float(params.get("center", 0.8))

    def moments(X, W=None):
        c, s = np.cos(X), np.sin(X)
        if W is None:
            return c, s, c.mean(axis=-2, keepdims=True), s.mean(axis=-2, keepdims=True)
        return c, s, (W * c).mean(axis=-2, keepdims=True), (W * s).mean(axis=-2, keepdims=True)

    def field(t, P, u):
        c, s, C, S = moments(np.asarray(P))
        return np.asarray(u, dtype=float)[..., None, :] - kappa * (s * C - c * S)

    def jac_x(t, P, u):
        c, s, C, S = moments(np.asarray(P))
        d = -kappa * (c * C + s * S)
        shape = np.broadcast_shapes(d.shape, np.shape(u)[:-1] + (1, 1))
        return np.broadcast_to(d, shape)[..., None].copy()

    def jac_measure(t, P, u):
        x = np.asarray(P)[..., 0]
        K = kappa * np.cos(x[..., :, None] - x[..., None, :])
        shape = np.broadcast_shapes(K.shape, np.shape(u)[:-1] + (1, 1))
        return np.broadcast_to(K, shape)[..., None, None].copy()

    def contraction(t, P, W, u):
        c, s, Cw, Sw = moments(np.asarray(P), np.asarray(W))
        out = kappa * (c * Cw + s * Sw)
        return np.broadcast_to(out, np.broadcast_shapes(out.shape, np.shape(u)[:-1] + (1, 1))).copy()

    def cost(P):
        x = np.asarray(P)[..., 0]
        return 0.5 * np.mean((x - center) ** 2, axis=-1) + 0.5 * lam * np.mean(np.sin(x), axis=-1) ** 2

    def flat_gradient(P):
        P = np.asarray(P)
        S = np.mean(np.sin(P), axis=-2, keepdims=True)
        return (P - center) + lam * S * np.cos(P)

    return MeanFieldProblem(1, 1, field, jac_x, jac_measure, cost, flat_gradient, control_set,
                            grid, ensemble0, measure_jvp=contraction, measure_vjp=contraction,
                            name="kuramoto")


MF_REGISTRY: Dict[str, Callable] = {
    "steering": steering,
    "kuramoto": kuramoto,
}

MF_DEFAULTS = {
    "steering": dict(T=1.0, lower=[-1.0], upper=[1.0], init=("gaussian", 0.0, 0.3)),
    "kuramoto": dict(T=1.0, lower=[-1.0], upper=[1.0], init=("gaussian", 0.0, 0.8)),
}


def gaussian_ensemble(N: int, dim: int, mean, std, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.asarray(mean, dtype=float) + np.asarray(std, dtype=float) * rng.standard_normal((N, dim))


def grid_ensemble(N: int, lo: float, hi: float) -> np.ndarray:
    """``N`` equally spaced points in ``[lo, hi]`` (cell midpoints)."""
    return (lo + (hi - lo) * (np.arange(N) + 0.5) / N)[:, None]


def build_mean_field(name: str, grid: TimeGrid, control_set: ControlSet, ensemble0,
                     params: Optional[dict] = None):
    try:
        builder = MF_REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown mean-field scenario {name!r}; known: {', '.join(sorted(MF_REGISTRY))}") from None
    return builder(grid, control_set, ensemble0, params)


def default_mean_field(name: str, n_steps: int = 200, particles: int = 100, seed: int = 0,
                       params: Optional[dict] = None):
    d = MF_DEFAULTS[name]
    grid = TimeGrid(0.0, d["T"], n_steps)
    _, mean, std = d["init"]
    ens = gaussian_ensemble(particles, len(d["lower"]), mean, std, seed)
    return build_mean_field(name, grid, Box(d["lower"], d["upper"]), ens, params)
