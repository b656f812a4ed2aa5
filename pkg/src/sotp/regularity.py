"""Quantitative regularity of the static value P -> V_S(P, Q).

All values are computed by bridge solves against a fixed target Q on a grid.
Sources are either grid laws (mass at cell centers) or exact finite laws; a
``KernelFamily`` builds the kernel rows for whatever source points occur.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bridge import sinkhorn_solve
from .kernel import GaussBoundConstants, TransitionKernel, gaussian_kernel
from .measures import (DiscreteMeasure, DistributionFunction, Grid, GridMeasure, MeasureError, _atoms, entropy,
                       moments, wasserstein2_1d)


@dataclass(frozen=True)
class RegularityReport:
    name: str
    lhs: float
    rhs: float
    slack: float
    instance: dict = field(default_factory=dict)
    budget: float = 0.0

    @classmethod
    def make(cls, name, lhs, rhs, instance=None, budget=0.0):
        return cls(name, float(lhs), float(rhs), float(rhs) - float(lhs), dict(instance or {}), float(budget))

    def passed(self, tol=1e-6):
        return self.slack >= -(tol + self.budget)

    def row(self):
        return {"name": self.name, "lhs": self.lhs, "rhs": self.rhs, "slack": self.slack, "budget": self.budget,
                **{f"inst_{k}": v for k, v in self.instance.items()}}


# ---------------------------------------------------------------------------
# kernels for arbitrary source points


@dataclass(frozen=True)
class GaussianFamily:
    """Brownian kernel with variance a over [0, 1], targets on a fixed grid."""

    a: float
    target: Grid

    def kernel(self, points) -> TransitionKernel:
        return gaussian_kernel(self.a, np.asarray(points, dtype=float), self.target, 0.0, 1.0)

    @property
    def exact_C(self):
        return 1.0 / (2.0 * self.a)


@dataclass(frozen=True)
class KernelCallable:
    """Wraps any callable points -> TransitionKernel (PDE kernels, drifted kernels)."""

    fn: object
    target: Grid

    def kernel(self, points) -> TransitionKernel:
        return self.fn(np.asarray(points, dtype=float))


@dataclass(frozen=True)
class ConvexityCertificate:
    C: float
    min_second_difference: float
    certified: bool
    empirical: bool


def certify_convexity_constant(family, C, probe_points, tol=1e-12) -> ConvexityCertificate:
    """Check that x -> log K(x, y) + C x^2 has nonnegative second differences for every target y.

    ``probe_points`` must be equally spaced. For the Gaussian family with
    C = 1/(2a) the function is affine in x and the differences vanish to rounding.
    """
    x = np.asarray(probe_points, dtype=float)
    if x.size < 3 or not np.allclose(np.diff(x), x[1] - x[0]):
        raise ValueError("probe points must be at least three equally spaced values")
    K = family.kernel(x)
    g = K.log_values + C * (x * x)[:, None]
    finite = np.all(np.isfinite(g), axis=0)
    d2 = g[2:, finite] - 2 * g[1:-1, finite] + g[:-2, finite]
    worst = float(d2.min()) if d2.size else math.nan
    return ConvexityCertificate(float(C), worst, bool(worst >= -tol), not isinstance(family, GaussianFamily))


def estimate_convexity_constant(family, probe_points) -> float:
    """Smallest C making the probed second differences nonnegative (flagged empirical)."""
    x = np.asarray(probe_points, dtype=float)
    dx = x[1] - x[0]
    K = family.kernel(x)
    lv = K.log_values
    finite = np.all(np.isfinite(lv), axis=0)
    d2 = (lv[2:, finite] - 2 * lv[1:-1, finite] + lv[:-2, finite]) / (dx * dx)
    return float(max(-d2.min() / 2.0, 0.0))


def vs_value(P, Q: GridMeasure, family, tol=1e-11) -> float:
    """V_S(P, Q) with P a grid law (atoms at centers) or a finite law."""
    x, w = _atoms(P)
    keep = w > 0
    K = family.kernel(x[keep])
    return float(sinkhorn_solve(K, w[keep], Q, tol=tol).value_VS)


# ---------------------------------------------------------------------------
# random variables on a shared finite sample space


@dataclass(frozen=True)
class RandomVariableModel:
    """Finite sample space with weights; each variable is a vector of values on it."""

    weights: np.ndarray
    values: dict

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("sample-space weights must be nonnegative and sum to 1")
        for name, v in self.values.items():
            v = np.asarray(v, dtype=float)
            if v.shape != w.shape or not np.all(np.isfinite(v)):
                raise ValueError(f"variable {name!r} must be finite with one value per sample point")

    @classmethod
    def random(cls, rng, n_omega=64, names=("X1", "X2"), scale=1.0, shift=0.0):
        w = rng.dirichlet(np.ones(n_omega))
        vals = {n: shift + scale * rng.standard_normal(n_omega) for n in names}
        return cls(w, vals)

    def __getitem__(self, name):
        return np.asarray(self.values[name], dtype=float)

    def combine(self, lam, first="X1", second="X2"):
        return lam * self[first] + (1.0 - lam) * self[second]

    def expect(self, v):
        return float(np.dot(self.weights, v))

    def atoms(self, v) -> DiscreteMeasure:
        return DiscreteMeasure(np.asarray(v, dtype=float), self.weights)


def law_of(values, weights, grid: Grid) -> GridMeasure:
    """Push the sample-space weights through the values into the grid cells."""
    v = np.asarray(values, dtype=float)
    idx = grid.cell_index(v)
    if np.any(idx < 0) or np.any(idx >= grid.n):
        bad = v[(idx < 0) | (idx >= grid.n)]
        raise MeasureError(f"values {bad[:3]} fall outside [{grid.grid_min}, {grid.grid_max})")
    return GridMeasure.on_grid(grid, np.bincount(idx, weights=np.asarray(weights, dtype=float), minlength=grid.n))


def _l2(P):
    return math.sqrt(moments(P)[1])


def _sd(P):
    return math.sqrt(max(moments(P)[2], 0.0))


def gaussian_lipschitz_constant(a, P0, P1, Q):
    """(1/2a)(|x|_P0 + |x|_P1 + 2(1 + max(sd P0, sd P1)) |x|_Q)."""
    return (_l2(P0) + _l2(P1) + 2.0 * (1.0 + max(_sd(P0), _sd(P1))) * _l2(Q)) / (2.0 * a)


def general_lipschitz_constant(c: GaussBoundConstants, C, P0, P1, Q):
    """f(max(|x|_P0, |x|_P1), |x|_Q) with f(x, y) = 2 C2 x^2 + 2 (C2 y^2 + C1) + C."""
    x = max(_l2(P0), _l2(P1))
    y = _l2(Q)
    return 2 * c.C2 * x * x + 2 * (c.C2 * y * y + c.C1) + C


# ---------------------------------------------------------------------------
# semiconcavity in the random variable


def semiconcavity_check(model: RandomVariableModel, lambdas, Q: GridMeasure, family, C, *, bin_grid: Grid = None,
                        tol=1e-11, first="X1", second="X2", certify=True) -> list:
    """lam V(X1) + (1 - lam) V(X2) <= V(lam X1 + (1 - lam) X2) + lam (1 - lam) C E|X1 - X2|^2.

    Without ``bin_grid`` the laws are the exact finite laws and the budget is
    10 * tol. With ``bin_grid`` they are binned onto it, and the budget adds
    Lipschitz estimate times the bin width.
    """
    if certify:
        probe = np.linspace(-2.0, 2.0, 41)
        cert = certify_convexity_constant(family, C, probe)
        if not cert.certified:
            raise ValueError(f"C = {C} is not a convexity constant for this kernel "
                             f"(second difference {cert.min_second_difference:.3e})")
    X1, X2 = model[first], model[second]
    w = model.weights

    def law(v):
        return law_of(v, w, bin_grid) if bin_grid is not None else model.atoms(v)

    L1, L2 = law(X1), law(X2)
    V1, V2 = vs_value(L1, Q, family, tol), vs_value(L2, Q, family, tol)
    spread = model.expect((X1 - X2) ** 2)
    budget = 10 * tol
    if bin_grid is not None:
        a = getattr(family, "a", None)
        lip = gaussian_lipschitz_constant(a, L1, L2, Q) if a else 1.0
        budget += lip * bin_grid.h
    out = []
    for lam in lambdas:
        lam = float(lam)
        if lam == 1.0:
            Vm = V1
        elif lam == 0.0:
            Vm = V2
        else:
            Vm = vs_value(law(model.combine(lam, first, second)), Q, family, tol)
        lhs = lam * V1 + (1 - lam) * V2
        rhs = Vm + lam * (1 - lam) * C * spread
        out.append(RegularityReport.make("semiconcavity", lhs, rhs, {"lambda": lam, "C": C}, budget))
    return out


# ---------------------------------------------------------------------------
# displacement interpolation


def _merged_quantile_pieces(P0, P1):
    from .measures import _segment_values

    b0, a0, c0 = DistributionFunction.of(P0).segments()
    b1, a1, c1 = DistributionFunction.of(P1).segments()
    u = np.union1d(b0, b1)
    u0, u1 = u[:-1], u[1:]
    keep = u1 > u0
    u0, u1 = u0[keep], u1[keep]
    p0, p1 = _segment_values(b0, a0, c0, u0, u1)
    q0, q1 = _segment_values(b1, a1, c1, u0, u1)
    return u0, u1, (p0, p1), (q0, q1)


def _bin_pieces(grid: Grid, lo, hi, mass):
    """Spread each mass uniformly on [lo, hi] (a point mass when lo == hi) into grid cells."""
    e = grid.edges
    w = np.zeros(grid.n)
    point = hi - lo <= 1e-14 * (1 + np.abs(lo))
    if np.any(point):
        idx = np.clip(grid.cell_index(lo[point]), 0, grid.n - 1)
        np.add.at(w, idx, mass[point])
    sp = ~point
    if np.any(sp):
        l, h, m = lo[sp], hi[sp], mass[sp]
        over = np.clip(np.minimum(h[:, None], e[None, 1:]) - np.maximum(l[:, None], e[None, :-1]), 0.0, None)
        w += (m / (h - l)) @ over
    return w


def displacement_interpolation(P0: GridMeasure, P1: GridMeasure, t) -> GridMeasure:
    """Law of (1 - t) F0^-1(U) + t F1^-1(U), binned exactly onto the grid of P0."""
    if not P0.same_grid(P1):
        raise ValueError("interpolation endpoints must share a grid")
    u0, u1, (p0, p1), (q0, q1) = _merged_quantile_pieces(P0, P1)
    x0 = (1 - t) * p0 + t * q0
    x1 = (1 - t) * p1 + t * q1
    lo, hi = np.minimum(x0, x1), np.maximum(x0, x1)
    w = _bin_pieces(P0.grid, lo, hi, u1 - u0)
    return GridMeasure.on_grid(P0.grid, w, normalize=True)


def displacement_interpolation_atoms(P0, P1, t) -> DiscreteMeasure:
    """Monotone interpolation of two finite laws (or grid laws as center atoms), without binning."""
    A0 = P0.as_atoms() if isinstance(P0, GridMeasure) else P0
    A1 = P1.as_atoms() if isinstance(P1, GridMeasure) else P1
    u0, u1, (p0, _), (q0, _) = _merged_quantile_pieces(A0, A1)
    return DiscreteMeasure((1 - t) * p0 + t * q0, u1 - u0)


def displacement_convexity_probe(P0, P1, Q: GridMeasure, family, C, t_grid=(0.0, 0.5, 1.0), tol=1e-11,
                                 binned=False) -> list:
    """Midpoint convexity of G(rho) = -V_S(rho, Q) + C int x^2 drho along the interpolation.

    With ``binned`` the interpolants are binned grid laws and the budget is the
    Lipschitz estimate times the cell width; otherwise they are exact finite laws.
    """
    def rho(t):
        return displacement_interpolation(P0, P1, t) if binned else displacement_interpolation_atoms(P0, P1, t)

    def G(r):
        return -vs_value(r, Q, family, tol) + C * moments(r)[1]

    t_grid = np.asarray(t_grid, dtype=float)
    Gs = {float(t): G(rho(t)) for t in t_grid}
    budget = 10 * tol
    if binned:
        a = getattr(family, "a", None)
        lip = gaussian_lipschitz_constant(a, P0, P1, Q) if a else 1.0
        budget += lip * P0.grid.h
    out = []
    ts = sorted(Gs)
    for i in range(len(ts) - 2):
        t0, tm, t1 = ts[i], ts[i + 1], ts[i + 2]
        lam = (tm - t0) / (t1 - t0)
        out.append(RegularityReport.make("displacement_convexity", Gs[tm], (1 - lam) * Gs[t0] + lam * Gs[t1],
                                         {"t0": t0, "t": tm, "t1": t1, "C": C}, budget))
    return out


# ---------------------------------------------------------------------------
# Lipschitz and continuity


def lipschitz_check(P0, P1, Q: GridMeasure, family, constants: GaussBoundConstants, C, tol=1e-11) -> list:
    """Both Lipschitz bounds for |V(P0) - V(P1)|; W2 uses the same center-atom laws the solver sees."""
    V0, V1 = vs_value(P0, Q, family, tol), vs_value(P1, Q, family, tol)
    A0 = P0.as_atoms() if isinstance(P0, GridMeasure) else P0
    A1 = P1.as_atoms() if isinstance(P1, GridMeasure) else P1
    w2 = wasserstein2_1d(A0, A1)
    lhs = abs(V0 - V1)
    kg = general_lipschitz_constant(constants, C, A0, A1, Q)
    inst = {"W2": w2, "V0": V0, "V1": V1}
    out = [RegularityReport.make("lipschitz_general", lhs, kg * w2, {**inst, "kappa": kg}, 10 * tol)]
    a = getattr(family, "a", None)
    if a is not None:
        kgs = gaussian_lipschitz_constant(a, A0, A1, Q)
        out.append(RegularityReport.make("lipschitz_gaussian", lhs, kgs * w2, {**inst, "kappa": kgs}, 10 * tol))
    return out


def continuity_probe(P_sequence, P_limit, Q: GridMeasure, family, kappa=None, constants=None, C=None,
                     tol=1e-11) -> list:
    """|V(P_n) - V(P)| <= kappa W2(P_n, P) + budget along a sequence.

    Without ``kappa`` the general Lipschitz constant is evaluated per pair from
    ``constants`` and ``C``.
    """
    VL = vs_value(P_limit, Q, family, tol)
    AL = P_limit.as_atoms() if isinstance(P_limit, GridMeasure) else P_limit
    out = []
    for n, P in enumerate(P_sequence):
        A = P.as_atoms() if isinstance(P, GridMeasure) else P
        w2 = wasserstein2_1d(A, AL)
        k = kappa if kappa is not None else general_lipschitz_constant(constants, C, A, AL, Q)
        gap = abs(vs_value(P, Q, family, tol) - VL)
        out.append(RegularityReport.make("continuity", gap, k * w2, {"n": n, "W2": w2, "kappa": k}, 10 * tol))
    return out


def shifted_sequence(P: DiscreteMeasure, ns):
    """P(. - 1/n): W2 to P is exactly 1/n."""
    return [DiscreteMeasure(P.locations + 1.0 / n, P.weights) for n in ns]


def mollified_sequence(P: GridMeasure, ns):
    """P convolved with N(0, 1/n^2) on the same grid (renormalized in the box)."""
    from scipy.stats import norm

    c = P.centers
    e = P.grid.edges
    seq = []
    for n in ns:
        s = 1.0 / n
        spread = norm.cdf((e[None, 1:] - c[:, None]) / s) - norm.cdf((e[None, :-1] - c[:, None]) / s)
        seq.append(GridMeasure.on_grid(P.grid, P.weights @ spread, normalize=True))
    return seq


def constant_sequence(P, length):
    return [P] * length


# ---------------------------------------------------------------------------
# moment-measure functional


@dataclass(frozen=True)
class PsiReport:
    value: float
    entropy: float
    VS: float
    cross: float
    finite: bool


def psi_functional(P: GridMeasure, Q: GridMeasure, family, C, tol=1e-11) -> PsiReport:
    """S(P) - V_S(P, Q) + C int int |x - y|^2 dP dQ."""
    S = entropy(P)
    if not math.isfinite(S):
        return PsiReport(math.inf, S, math.nan, math.nan, False)
    V = vs_value(P, Q, family, tol)
    mP, m2P, _ = moments(P)
    mQ, m2Q, _ = moments(Q)
    cross = m2P - 2 * mP * mQ + m2Q
    return PsiReport(S - V + C * cross, S, V, cross, True)
