"""Dual side: Hopf-Cole value functions, dual objectives, Hamiltonians, drift recovery."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded
from scipy.special import logsumexp

from .bridge import ConvergenceError, SchrodingerPotentials, _log, _weights
from .hpath import DriftField, MarginalFlow, grid_coefficient, time_weights
from .kernel import TransitionKernel
from .measures import Grid


@dataclass(frozen=True)
class DualPotential:
    """Terminal payoff f on a grid, or f(t, x) on a time-space grid when ``time_grid`` is set."""

    values: np.ndarray
    grid: Grid
    time_grid: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if np.any(np.isnan(v)):
            raise ValueError("dual potential contains NaN")
        if not np.all(np.isfinite(v)):
            raise ValueError("dual potential must be finite")
        expect = (self.grid.n,) if self.time_grid is None else (len(self.time_grid), self.grid.n)
        if v.shape != expect:
            raise ValueError(f"dual potential has shape {v.shape}, expected {expect}")

    def shifted(self, c):
        return DualPotential(self.values + c, self.grid, self.time_grid)


@dataclass(frozen=True)
class ValueFunction:
    time_grid: np.ndarray
    grid: Grid
    values: np.ndarray

    @property
    def initial(self):
        return self.values[0]


def hopf_cole_phi(kernels, f: DualPotential) -> ValueFunction:
    """phi(t_k, x_i) = log sum_j K_{t_k}[i, j] exp(f_j) h_y, in log-sum-exp form."""
    fv = np.asarray(f.values, dtype=float)
    if np.any(np.isnan(fv)):
        raise ValueError("payoff contains NaN")
    lh = math.log(kernels[0].target_cell_volume)
    rows = [logsumexp(K.log_values + fv[None, :], axis=1) + lh for K in kernels]
    times = np.array([K.s for K in kernels])
    return ValueFunction(times, kernels[0].target, np.vstack(rows))


def hjb_residual(phi: ValueFunction, coeffs, f_running: DualPotential | None = None, margin=0.0) -> float:
    """Max over interior nodes of |d_t phi + a/2 phi'' + xi phi' + a/2 phi'^2 (+ f)|.

    ``margin`` drops nodes that close to the box walls, where box truncation of
    the kernel (not the differencing) dominates.
    """
    v = phi.values
    t = np.asarray(phi.time_grid, dtype=float)
    h = phi.grid.h
    x = phi.grid.centers
    if v.shape[0] < 3 or v.shape[1] < 3:
        raise ValueError("need at least three nodes in time and space")
    dt = np.gradient(v, t, axis=0)
    dx = (v[:, 2:] - v[:, :-2]) / (2 * h)
    dxx = (v[:, 2:] - 2 * v[:, 1:-1] + v[:, :-2]) / (h * h)
    xin = x[1:-1]
    keep = (xin > phi.grid.grid_min + margin) & (xin < phi.grid.grid_max - margin)
    worst = 0.0
    for k in range(1, len(t) - 1):
        a = grid_coefficient(coeffs, "a", t[k], x[1:-1])
        xi = grid_coefficient(coeffs, "xi", t[k], x[1:-1])
        r = dt[k, 1:-1] + 0.5 * a * dxx[k] + xi * dx[k] + 0.5 * a * dx[k] ** 2
        if f_running is not None:
            r = r + f_running.values[k, 1:-1]
        worst = max(worst, float(np.max(np.abs(r[keep]), initial=0.0)))
    return worst


def dual_objective(f: DualPotential, phi: ValueFunction, P0, P1) -> float:
    """sum f P1 - sum phi(0, .) P0."""
    return float(np.dot(f.values, _weights(P1)) - np.dot(phi.values[0], _weights(P0)))


def terminal_dual_value(K: TransitionKernel, f: DualPotential, P0, P1) -> float:
    """Dual objective with phi(0, .) taken from the single kernel K(0 -> 1)."""
    phi0 = logsumexp(K.log_values + f.values[None, :], axis=1) + math.log(K.target_cell_volume)
    return float(np.dot(f.values, _weights(P1)) - np.dot(phi0, _weights(P0)))


def potentials_to_dual(pot: SchrodingerPotentials, grid: Grid) -> DualPotential:
    """f*_j = log(nu1_j / h_y), the log-density of nu1."""
    if not np.all(np.isfinite(pot.log_nu1)):
        raise ValueError("potential nu1 has zero entries; the payoff would be -inf")
    return DualPotential(pot.log_nu1 - math.log(grid.h), grid)


def dual_ascent(K: TransitionKernel, P0, P1, tol=1e-10, max_iter=10_000, history=None):
    """Block-coordinate ascent on the terminal dual.

    With g = -phi(0, .) as a free variable the objective
    sum f P1 + sum g P0 - sum_ij exp(g_i) K_ij exp(f_j) h + 1 is concave; exact
    maximization in g then in f is one Sinkhorn sweep. At a g-optimum the
    objective equals the dual of f. Stops when the f-gradient, P1 minus the
    column marginal of the tilted measure, has sup-norm <= tol.
    Returns (DualPotential, value); ``history``, if a list, receives the dual
    value after each sweep.
    """
    a, b = _weights(P0), _weights(P1)
    lK = K.log_values + math.log(K.target_cell_volume)
    la, lb = _log(a), _log(b)
    if np.any(b <= 0):
        raise ValueError("dual ascent needs a target with full support (f = log density must be finite)")
    def g_step(f):
        return np.where(np.isfinite(la), la - logsumexp(lK + f[None, :], axis=1), -np.inf)

    f = np.zeros(b.size)
    g = g_step(f)
    grad = math.inf
    for it in range(1, max_iter + 1):
        f = lb - logsumexp(lK + g[:, None], axis=0)
        g = g_step(f)
        col = np.exp(f + logsumexp(lK + g[:, None], axis=0))
        grad = float(np.max(np.abs(b - col)))
        if history is not None:
            history.append(terminal_dual_value(K, DualPotential(f, K.target), P0, P1))
        if grad <= tol:
            break
    else:
        raise ConvergenceError(f"dual ascent stalled (gradient {grad:.3e})", grad, max_iter)
    fp = DualPotential(f, K.target)
    return fp, terminal_dual_value(K, fp, P0, P1)


@dataclass(frozen=True)
class QuadraticHamiltonian:
    """H(t, x; z) = xi z + a z^2 / 2, the conjugate of (u - xi)^2 / (2a)."""

    coeffs: object


@dataclass(frozen=True)
class SampledHamiltonian:
    """Numeric Legendre transform of a convex L over a fixed u-grid."""

    L: object
    u_grid: np.ndarray

    def certify_convex(self, t, x, tol=1e-9):
        vals = np.asarray(self.L(t, x, self.u_grid), dtype=float)
        return bool(np.all(np.diff(vals, 2) >= -tol))


def hamiltonian(desc, t, x, z):
    if isinstance(desc, QuadraticHamiltonian):
        a = grid_coefficient(desc.coeffs, "a", t, x)
        xi = grid_coefficient(desc.coeffs, "xi", t, x)
        z = np.asarray(z, dtype=float)
        out = xi * z + 0.5 * a * z * z
        return float(out) if np.ndim(out) == 0 else out
    if isinstance(desc, SampledHamiltonian):
        u = desc.u_grid
        z = np.asarray(z, dtype=float)
        Lu = np.asarray(desc.L(t, x, u), dtype=float)
        out = np.max(np.multiply.outer(z, u) - Lu, axis=-1)
        return float(out) if np.ndim(out) == 0 else out
    raise TypeError(f"unknown Hamiltonian descriptor {type(desc).__name__}")


def drift_recovery(phi: ValueFunction, coeffs) -> DriftField:
    """b = a d/dx phi + xi, using the same differences as the h-path drift."""
    x = phi.grid.centers
    d = np.gradient(phi.values, phi.grid.h, axis=1, edge_order=2)
    vals = np.vstack([
        grid_coefficient(coeffs, "a", t, x) * d[k] + grid_coefficient(coeffs, "xi", t, x)
        for k, t in enumerate(phi.time_grid)
    ])
    return DriftField(np.asarray(phi.time_grid, dtype=float), phi.grid, vals)


def _backward_operator(coeffs, t, grid, fvals):
    """Tridiagonal (lower, diag, upper) of a/2 psi'' + xi psi' + f psi with mirrored walls."""
    h = grid.h
    x = grid.centers
    a = grid_coefficient(coeffs, "a", t, x)
    xi = grid_coefficient(coeffs, "xi", t, x)
    lo = 0.5 * a / (h * h) - xi / (2 * h)
    up = 0.5 * a / (h * h) + xi / (2 * h)
    diag = -a / (h * h) + fvals
    # zero-slope walls: the ghost node mirrors its inner neighbour
    up = up.copy()
    lo = lo.copy()
    up[0] += lo[0]
    lo[-1] += up[-1]
    return lo, diag, up


def running_cost_phi(coeffs, f: DualPotential, substeps=1) -> ValueFunction:
    """Backward Crank-Nicolson for d_t psi + a/2 psi'' + xi psi' + f psi = 0, psi(1) = 1; phi = log psi."""
    if f.time_grid is None:
        raise ValueError("running-cost payoff needs a time grid")
    t = np.asarray(f.time_grid, dtype=float)
    grid = f.grid
    n = grid.n
    psi = np.ones(n)
    out = np.empty((len(t), n))
    out[-1] = 0.0
    for k in range(len(t) - 1, 0, -1):
        dt = (t[k] - t[k - 1]) / substeps
        for s in range(substeps):
            tau_hi = t[k] - s * dt
            tau_mid = tau_hi - 0.5 * dt
            lam = (tau_mid - t[k - 1]) / (t[k] - t[k - 1])
            fmid = (1 - lam) * f.values[k - 1] + lam * f.values[k]
            lo, diag, up = _backward_operator(coeffs, tau_mid, grid, fmid)
            rhs = psi + 0.5 * dt * diag * psi
            rhs[1:] += 0.5 * dt * lo[1:] * psi[:-1]
            rhs[:-1] += 0.5 * dt * up[:-1] * psi[1:]
            ab = np.zeros((3, n))
            ab[0, 1:] = -0.5 * dt * up[:-1]
            ab[1] = 1.0 - 0.5 * dt * diag
            ab[2, :-1] = -0.5 * dt * lo[1:]
            psi = solve_banded((1, 1), ab, rhs)
        if np.any(psi <= 0):
            raise ValueError(f"psi lost positivity at t={t[k - 1]}; use more substeps")
        out[k - 1] = np.log(psi)
    return ValueFunction(t, grid, out)


def running_dual_value(f: DualPotential, phi: ValueFunction, flow: MarginalFlow) -> float:
    """sum_k w_k sum_i f(t_k, x_i) P_{t_k, i} - sum phi(0, .) P_0 (trapezoid in time)."""
    tw = time_weights(flow.time_grid)
    run = float(np.sum(tw * np.einsum("ki,ki->k", f.values, flow.weights)))
    return run - float(np.dot(phi.values[0], flow.weights[0]))
