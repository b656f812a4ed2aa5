"""Schrödinger system solves and the static entropic value.

Potentials are kept in log form. ``nu1`` carries the target quadrature (it is a
mass vector on the target grid), so the endpoint coupling is
``mu[i, j] = nu0[i] * K[i, j] * nu1[j]`` and the prior coupling is
``P0[i] * K[i, j] * h_y``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .kernel import GaussBoundConstants, TransitionKernel
from .measures import GridMeasure, entropy


class ConvergenceError(RuntimeError):
    def __init__(self, message, residual=math.nan, iterations=0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


def _log(w):
    w = np.asarray(w, dtype=float)
    with np.errstate(divide="ignore"):
        return np.log(w)


def _weights(P):
    return np.asarray(P.weights if hasattr(P, "weights") else P, dtype=float)


@dataclass(frozen=True)
class SchrodingerPotentials:
    """Product-measure factors; canonical gauge is ``sum(nu0) == 1``."""

    log_nu0: np.ndarray
    log_nu1: np.ndarray
    gauge: str = "sum_nu0"
    log_hbar: np.ndarray | None = field(default=None, repr=False)
    iterations: int = 0
    residual: float = math.nan

    @property
    def nu0(self):
        return np.exp(self.log_nu0)

    @property
    def nu1(self):
        return np.exp(self.log_nu1)

    def rescaled(self, gamma):
        """The gauge-equivalent pair (gamma nu0, nu1 / gamma)."""
        g = math.log(gamma)
        return SchrodingerPotentials(self.log_nu0 + g, self.log_nu1 - g, "none", self.log_hbar,
                                     self.iterations, self.residual)

    def canonical(self):
        c = float(logsumexp(self.log_nu0))
        return SchrodingerPotentials(self.log_nu0 - c, self.log_nu1 + c, "sum_nu0", self.log_hbar,
                                     self.iterations, self.residual)


@dataclass(frozen=True)
class Coupling:
    log_matrix: np.ndarray
    source_marginal: GridMeasure | None = None
    target_marginal: GridMeasure | None = None
    residual: float = 0.0

    @classmethod
    def from_matrix(cls, matrix, source=None, target=None):
        return cls(_log(matrix), source, target)

    @classmethod
    def from_potentials(cls, K: TransitionKernel, pot: SchrodingerPotentials, source=None, target=None):
        lm = pot.log_nu0[:, None] + K.log_values + pot.log_nu1[None, :]
        return cls(lm, source, target, pot.residual)

    @property
    def matrix(self):
        return np.exp(self.log_matrix)

    def row_sums(self):
        return np.exp(logsumexp(self.log_matrix, axis=1))

    def col_sums(self):
        return np.exp(logsumexp(self.log_matrix, axis=0))


@dataclass
class BridgeReport:
    value_VS: float
    iterations: int
    marginal_residual: float
    potentials: SchrodingerPotentials
    coupling: Coupling
    residual_history: list = field(default_factory=list, repr=False)

    def summary(self):
        return {
            "value_VS": self.value_VS,
            "iterations": self.iterations,
            "marginal_residual": self.marginal_residual,
        }


def _check_inputs(K, P0, P1):
    a, b = _weights(P0), _weights(P1)
    if K.shape != (a.size, b.size):
        raise ValueError(f"kernel shape {K.shape} does not match marginals ({a.size}, {b.size})")
    return a, b


def _marginal_errors(lK, la, lb, lnu0, lnu1, a, b):
    row = np.exp(lnu0 + logsumexp(lK + lnu1[None, :], axis=1))
    col = np.exp(lnu1 + logsumexp(lK + lnu0[:, None], axis=0))
    row = np.where(np.isfinite(la), row, 0.0)
    col = np.where(np.isfinite(lb), col, 0.0)
    return float(max(np.max(np.abs(row - a)), np.max(np.abs(col - b))))


def sinkhorn_solve(K: TransitionKernel, P0, P1, tol=1e-10, max_iter=10_000, init_log_nu1=None) -> BridgeReport:
    """Alternate the two marginal equations in the log domain until both hold to ``tol``."""
    if not tol > 0:
        raise ValueError("tol must be positive")
    a, b = _check_inputs(K, P0, P1)
    lK = K.log_values
    la, lb = _log(a), _log(b)
    h = K.target_cell_volume
    lnu1 = np.full(b.size, math.log(h)) if init_log_nu1 is None else np.array(init_log_nu1, dtype=float)
    lnu1 = np.where(np.isfinite(lb), lnu1, -np.inf)
    history = []
    res = math.inf
    for it in range(1, max_iter + 1):
        with np.errstate(invalid="ignore"):
            lnu0 = la - logsumexp(lK + lnu1[None, :], axis=1)
            lnu0 = np.where(np.isfinite(la), lnu0, -np.inf)
            reach = logsumexp(lK + lnu0[:, None], axis=0)
        if np.any(~np.isfinite(reach) & np.isfinite(lb)):
            raise ConvergenceError("target support is unreachable through the kernel", res, it)
        lnu1 = np.where(np.isfinite(lb), lb - reach, -np.inf)
        res = _marginal_errors(lK, la, lb, lnu0, lnu1, a, b)
        history.append(res)
        if res <= tol:
            break
    else:
        raise ConvergenceError(f"no convergence after {max_iter} iterations (residual {res:.3e})", res, max_iter)
    pot = SchrodingerPotentials(lnu0, lnu1, "none", iterations=it, residual=res).canonical()
    src = P0 if isinstance(P0, GridMeasure) else None
    tgt = P1 if isinstance(P1, GridMeasure) else None
    coupling = Coupling.from_potentials(K, pot, src, tgt)
    value = primal_value(coupling, K, P0)
    return BridgeReport(value, it, res, pot, coupling, history)


def fixed_point_hbar(K: TransitionKernel, P0, P1, tol=1e-10, max_iter=10_000) -> SchrodingerPotentials:
    """Iterate the single-function map for hbar(1, .) and read off (nu0, nu1).

    hbar_j = sum_i K_ij P0_i / (sum_k K_ik P1_k / hbar_k);  nu1 = P1 / hbar;
    nu0 = P0 / (K nu1).
    """
    a, b = _check_inputs(K, P0, P1)
    lK = K.log_values
    la, lb = _log(a), _log(b)
    lh = np.zeros(b.size)
    prev = math.inf
    rising = 0
    res = math.inf
    for it in range(1, max_iter + 1):
        inner = logsumexp(lK + (lb - lh)[None, :], axis=1)
        lh_new = logsumexp(lK + (la - inner)[:, None], axis=0)
        # the column marginal of the current pair is P1 * hbar_new / hbar
        ratio = np.exp(lh_new - lh)
        res = float(np.max(np.abs(b * ratio - b)))
        lh = lh_new
        if res <= tol:
            break
        rising = rising + 1 if res > prev else 0
        if rising >= 10:
            raise ConvergenceError(f"fixed-point map diverging (residual {res:.3e})", res, it)
        prev = res
    else:
        raise ConvergenceError(f"no convergence after {max_iter} iterations (residual {res:.3e})", res, max_iter)
    lnu1 = np.where(np.isfinite(lb), lb - lh, -np.inf)
    lnu0 = np.where(np.isfinite(la), la - logsumexp(lK + lnu1[None, :], axis=1), -np.inf)
    res = _marginal_errors(lK, la, lb, lnu0, lnu1, a, b)
    return SchrodingerPotentials(lnu0, lnu1, "none", lh, it, res).canonical()


def primal_value(coupling: Coupling, K: TransitionKernel, P0) -> float:
    """Relative entropy of the coupling against P0(dx) K(x, y) dy; +inf if not absolutely continuous."""
    lm = coupling.log_matrix
    la = _log(_weights(P0))
    ref = la[:, None] + K.log_values + math.log(K.target_cell_volume)
    pos = np.isfinite(lm)
    if np.any(~np.isfinite(ref[pos])):
        return math.inf
    m = np.exp(lm[pos])
    return float(np.sum(m * (lm[pos] - ref[pos])))


@dataclass(frozen=True)
class DecompositionReport:
    minus_VS: float
    H_product: float
    S_Q: float
    cross_log: float
    residual: float


def decomposition_check(P0, Q: GridMeasure, K: TransitionKernel, tol=1e-13, report=None) -> DecompositionReport:
    """Evaluate -V_S against H(P0 x Q | mu) - S(Q) + sum P0 Q log K."""
    rep = report or sinkhorn_solve(K, P0, Q, tol=tol)
    a, b = _weights(P0), _weights(Q)
    lm = rep.coupling.log_matrix
    prod = a[:, None] * b[None, :]
    pos = prod > 0
    H = float(np.sum(prod[pos] * (np.log(prod[pos]) - lm[pos])))
    S = entropy(Q)
    cross = float(np.sum(prod[pos] * K.log_values[pos]))
    rhs = H - S + cross
    return DecompositionReport(-rep.value_VS, H, S, cross, float(-rep.value_VS - rhs))


@dataclass(frozen=True)
class SandwichReport:
    terms: tuple
    gaps: tuple

    @property
    def worst_gap(self):
        return min(self.gaps)


def sandwich_check(P0, Q: GridMeasure, K: TransitionKernel, c: GaussBoundConstants, tol=1e-13,
                   report=None) -> SandwichReport:
    """Five-term chain bounding V_S - S(Q) by quadratic moments of mu and of P0 x Q."""
    rep = report or sinkhorn_solve(K, P0, Q, tol=tol)
    a, b = _weights(P0), _weights(Q)
    d2 = (K.target.centers[None, :] - K.source_points[:, None]) ** 2
    mu = rep.coupling.matrix
    prod = a[:, None] * b[None, :]
    t1 = -c.C1 + float(np.sum(mu * d2)) / c.C2
    t2 = -float(np.sum(mu * K.log_values))
    t3 = rep.value_VS - entropy(Q)
    t4 = -float(np.sum(prod * K.log_values))
    t5 = c.C1 + c.C2 * float(np.sum(prod * d2))
    terms = (t1, t2, t3, t4, t5)
    gaps = tuple(terms[k + 1] - terms[k] for k in range(4))
    return SandwichReport(terms, gaps)
