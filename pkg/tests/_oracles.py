"""Independent reference computations used by the tests.

Nothing here calls the package integrators: flows of linear and bilinear
systems come from matrix exponentials, derivatives from finite differences.
"""

from __future__ import annotations

import numpy as np


def expm(M, order: int = 20):
    """Matrix exponential by scaling and squaring of a truncated Taylor series."""
    M = np.asarray(M, dtype=float)
    norm = np.abs(M).sum(axis=-1).max()
    s = max(0, int(np.ceil(np.log2(norm))) + 1) if norm > 0 else 0
    A = M / 2.0 ** s
    out = np.eye(M.shape[0])
    term = np.eye(M.shape[0])
    for j in range(1, order + 1):
        term = term @ A / j
        out = out + term
    for _ in range(s):
        out = out @ out
    return out


def affine_flow(A, B, x0, values, h):
    """Exact nodes of ``x' = A x + B u`` for piecewise-constant ``u``."""
    A, B = np.atleast_2d(A), np.atleast_2d(B)
    n = A.shape[0]
    x = np.asarray(x0, dtype=float)
    out = [x]
    for u in np.atleast_2d(values):
        aug = np.zeros((n + 1, n + 1))
        aug[:n, :n] = A
        aug[:n, n] = B @ np.atleast_1d(u)
        E = expm(h * aug)
        x = E[:n, :n] @ x + E[:n, n]
        out.append(x)
    return np.array(out)


def bilinear_flow(generators, x0, values, h):
    """Exact nodes of ``x' = (sum_j u_j G_j) x`` for piecewise-constant ``u``."""
    x = np.asarray(x0, dtype=float)
    out = [x]
    for u in np.atleast_2d(values):
        x = expm(h * np.einsum("j,jab->ab", u, generators)) @ x
        out.append(x)
    return np.array(out)


def fd_gradient(fun, x, step=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        g[i] = (fun(x + e) - fun(x - e)) / (2 * step)
    return g


def fd_hessian(fun, x, step=1e-4):
    x = np.asarray(x, dtype=float)
    n = x.size
    H = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            ei = np.zeros(n)
            ej = np.zeros(n)
            ei[i] = step
            ej[j] = step
            H[i, j] = (fun(x + ei + ej) - fun(x + ei - ej) - fun(x - ei + ej) + fun(x - ei - ej)) / (4 * step * step)
    return 0.5 * (H + H.T)


def brute_minimum(h_of, lower, upper, points=201):
    """Smallest value of ``h_of`` on a dense tensor grid of the box."""
    axes = [np.linspace(lo, hi, points) for lo, hi in zip(lower, upper)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
    vals = np.array([h_of(u) for u in mesh])
    return float(vals.min()), mesh[int(vals.argmin())]


def rk4_reference(f, x0, t0, T, steps):
    """Plain RK4 on a uniform grid, written out independently."""
    h = (T - t0) / steps
    x = np.asarray(x0, dtype=float)
    out = [x]
    for k in range(steps):
        t = t0 + k * h
        k1 = f(t, x)
        k2 = f(t + h / 2, x + h / 2 * k1)
        k3 = f(t + h / 2, x + h / 2 * k2)
        k4 = f(t + h, x + h * k3)
        x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        out.append(x)
    return np.array(out)


def double_integrator_switch(tau, T=1.0):
    """Terminal state of ``x1' = x2, x2' = u`` from rest with ``u = +1`` then ``-1`` after ``tau``."""
    x2_tau = tau
    x1_tau = 0.5 * tau * tau
    r = T - tau
    return np.array([x1_tau + x2_tau * r - 0.5 * r * r, x2_tau - r])


def random_pair(problem, seed):
    """Two seeded random block controls on the problem grid."""
    from superadjoint.scenarios import random_block_control

    rng = np.random.default_rng(seed)
    grid, cs = problem.horizon, problem.control_set
    return random_block_control(grid, cs, rng), random_block_control(grid, cs, rng)
