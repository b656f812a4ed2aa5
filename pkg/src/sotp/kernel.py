"""Transition densities of the reference diffusion.

Kernels are stored as log-values ``log K[i, j] = log p(s, x_i; t, y_j)`` for
source points ``x_i`` and target cell centers ``y_j``; wide Gaussian grids
underflow in the linear domain.
"""
from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import solve_banded
from scipy.special import logsumexp

from .measures import Grid, GridMeasure

log = logging.getLogger(__name__)


class KernelError(ValueError):
    pass


def _const_field(c):
    c = float(c)
    return lambda t, x: np.full(np.shape(x), c)


@dataclass(frozen=True)
class CoefficientField:
    """Diffusion ``a(t, x)`` and drift ``xi(t, x)`` of the reference process (d = 1).

    ``a_bounds`` declares ``(r**2, a_max)`` and ``xi_bound`` the sup-norm of xi.
    ``a_const``/``xi_const`` are set for constant fields so closed forms apply.
    """

    a: Callable
    xi: Callable
    a_bounds: tuple = (0.0, math.inf)
    xi_bound: float = math.inf
    a_const: float | None = None
    xi_const: float | None = None

    @classmethod
    def constant(cls, a, xi=0.0):
        if not a > 0:
            raise KernelError("diffusion must be positive")
        return cls(_const_field(a), _const_field(xi), (float(a), float(a)), abs(float(xi)), float(a), float(xi))

    @property
    def is_constant(self):
        return self.a_const is not None and self.xi_const is not None

    def a_at(self, t, x):
        return np.asarray(self.a(t, np.asarray(x, dtype=float)), dtype=float)

    def xi_at(self, t, x):
        return np.asarray(self.xi(t, np.asarray(x, dtype=float)), dtype=float)

    def sigma_at(self, t, x):
        return np.sqrt(np.maximum(self.a_at(t, x), 0.0))

    def check_bounds(self, x, times, slack=1e-12):
        """Raise if the sampled coefficients leave the declared bounds."""
        lo, hi = self.a_bounds
        for t in np.atleast_1d(times):
            a = self.a_at(t, x)
            if np.any(a <= 0):
                raise KernelError(f"non-positive diffusion on the grid at t={t}")
            if np.any(a < lo - slack) or np.any(a > hi + slack):
                raise KernelError(f"diffusion outside declared bounds {self.a_bounds} at t={t}")
            if np.any(np.abs(self.xi_at(t, x)) > self.xi_bound + slack):
                raise KernelError(f"drift exceeds declared bound {self.xi_bound} at t={t}")


@dataclass(frozen=True)
class GaussBoundConstants:
    C1: float
    C2: float

    def __post_init__(self):
        if not self.C2 > 0:
            raise KernelError("C2 must be positive")
        if self.C1 < 0:
            raise KernelError("C1 must be nonnegative")


@dataclass(frozen=True)
class TransitionKernel:
    """Density values from source points to the cells of a target grid.

    ``identity`` marks the degenerate kernel at ``t == s`` whose rows are
    cell indicators divided by the cell width.
    ``normalization`` holds the row factors that were divided out after a PDE solve.
    """

    source_points: np.ndarray
    target: Grid
    log_values: np.ndarray
    s: float
    t: float
    identity: bool = False
    normalization: np.ndarray | None = field(default=None, repr=False)
    kind: str = "gaussian"

    @property
    def values(self):
        return np.exp(self.log_values)

    @property
    def target_cell_volume(self):
        return self.target.h

    @property
    def shape(self):
        return self.log_values.shape

    @property
    def target_points(self):
        return self.target.centers

    def row_quadrature(self):
        return np.exp(logsumexp(self.log_values, axis=1)) * self.target.h

    def is_positive(self):
        return bool(np.all(np.isfinite(self.log_values)))

    def scaled(self, gamma):
        return TransitionKernel(self.source_points, self.target, self.log_values + math.log(gamma),
                                self.s, self.t, self.identity, self.normalization, self.kind)

    def row_normalized(self):
        """Rows rescaled so the target quadrature of each row is exactly 1."""
        lv = self.log_values - (logsumexp(self.log_values, axis=1) + math.log(self.target.h))[:, None]
        return TransitionKernel(self.source_points, self.target, lv, self.s, self.t, self.identity,
                                self.normalization, self.kind)

    def transposed(self):
        """Swap source and target; needs sources at the target cell centers."""
        if self.source_points.shape != (self.target.n,) or not np.allclose(self.source_points, self.target.centers):
            raise KernelError("transpose needs sources on the target grid")
        return TransitionKernel(self.target.centers, self.target, self.log_values.T.copy(), self.s, self.t,
                                self.identity, None, self.kind)

    # serialization
    def header(self):
        return {
            "kind": self.kind,
            "s": self.s,
            "t": self.t,
            "identity": self.identity,
            "target": self.target.to_dict(),
            "target_cell_volume": self.target.h,
            "source_points": self.source_points.tolist(),
            "normalization": None if self.normalization is None else self.normalization.tolist(),
        }

    def to_csv(self, header_lines=()):
        buf = io.StringIO()
        for line in header_lines:
            buf.write(f"# {line}\n")
        buf.write("i,j,value,log_value\n")
        lv = self.log_values
        for i in range(lv.shape[0]):
            for j in range(lv.shape[1]):
                v = float(lv[i, j])
                buf.write(f"{i},{j},{math.exp(v)!r},{v!r}\n")
        return buf.getvalue()

    @classmethod
    def from_parts(cls, header, csv_text):
        ns, nt = len(header["source_points"]), header["target"]["n"]
        lv = np.full((ns, nt), -np.inf)
        for line in csv_text.splitlines():
            if not line.strip() or line.startswith("#") or line.startswith("i,"):
                continue
            i, j, _, v = line.split(",")
            lv[int(i), int(j)] = float(v)
        norm = header.get("normalization")
        return cls(np.asarray(header["source_points"], dtype=float), Grid.from_dict(header["target"]), lv,
                   float(header["s"]), float(header["t"]), bool(header["identity"]),
                   None if norm is None else np.asarray(norm), header.get("kind", "gaussian"))

    def save(self, json_path, header_lines=()):
        """Write a JSON header plus an ``(i, j, value)`` CSV next to it."""
        csv_path = str(json_path).rsplit(".", 1)[0] + ".csv"
        head = self.header()
        head["values_csv"] = csv_path.rsplit("/", 1)[-1]
        with open(csv_path, "w") as fh:
            fh.write(self.to_csv(header_lines))
        with open(json_path, "w") as fh:
            json.dump(head, fh, indent=1)
        return csv_path

    @classmethod
    def load(cls, json_path):
        with open(json_path) as fh:
            head = json.load(fh)
        base = str(json_path).rsplit("/", 1)
        csv_path = head["values_csv"] if len(base) == 1 else base[0] + "/" + head["values_csv"]
        with open(csv_path) as fh:
            return cls.from_parts(head, fh.read())


def as_points(obj):
    """Source locations from a Grid, 1-D GridMeasure, or array."""
    if isinstance(obj, Grid):
        return obj.centers
    if isinstance(obj, GridMeasure):
        return obj.centers
    return np.atleast_1d(np.asarray(obj, dtype=float))


def as_grid(obj):
    if isinstance(obj, Grid):
        return obj
    if isinstance(obj, GridMeasure):
        return obj.grid
    raise KernelError("target must be a Grid or GridMeasure")


def gaussian_kernel(a, source_grid, target_grid, s, t, xi=0.0) -> TransitionKernel:
    """Kernel of ``dX = xi dt + sqrt(a) dW``: Gaussian with mean shift xi*(t-s)."""
    if not t > s:
        raise KernelError("gaussian_kernel needs t > s")
    if not a > 0:
        raise KernelError("diffusion must be positive")
    x = as_points(source_grid)
    tg = as_grid(target_grid)
    tau = t - s
    var = a * tau
    d = tg.centers[None, :] - x[:, None] - xi * tau
    lv = -0.5 * math.log(2 * math.pi * var) - d * d / (2 * var)
    return TransitionKernel(x, tg, lv, float(s), float(t), kind="gaussian")


def identity_kernel(grid, t) -> TransitionKernel:
    """Degenerate kernel at equal times: each center maps to its own cell."""
    g = as_grid(grid)
    lv = np.full((g.n, g.n), -np.inf)
    np.fill_diagonal(lv, -math.log(g.h))
    return TransitionKernel(g.centers, g, lv, float(t), float(t), identity=True, kind="identity")


def _initial_rows(points, grid):
    """Cell-indicator densities; off-center sources are split linearly between cells."""
    n = grid.n
    pos = (points - grid.centers[0]) / grid.h
    if np.any(pos < -1e-9) or np.any(pos > n - 1 + 1e-9):
        raise KernelError("source points must lie between the first and last target centers")
    pos = np.clip(pos, 0.0, n - 1)
    k = np.minimum(np.floor(pos).astype(int), n - 2) if n > 1 else np.zeros(points.size, int)
    frac = pos - k
    P = np.zeros((n, points.size))
    cols = np.arange(points.size)
    P[k, cols] += (1.0 - frac) / grid.h
    if n > 1:
        P[k + 1, cols] += frac / grid.h
    return P


def _fp_operator(coeffs, t, grid):
    """Tridiagonal forward operator (lower, diag, upper) in flux form, zero-flux walls."""
    h = grid.h
    a = coeffs.a_at(t, grid.centers)
    if np.any(a <= 0):
        raise KernelError(f"non-positive diffusion on the grid at t={t}")
    xe = coeffs.xi_at(t, grid.edges[1:-1])
    n = grid.n
    lower = np.zeros(n)
    upper = np.zeros(n)
    diag = np.zeros(n)
    lower[1:] = (0.5 * a[:-1] / h + 0.5 * xe) / h
    upper[:-1] = (0.5 * a[1:] / h - 0.5 * xe) / h
    diag[:-1] += (-0.5 * a[:-1] / h - 0.5 * xe) / h
    diag[1:] += (-0.5 * a[1:] / h + 0.5 * xe) / h
    return lower, diag, upper


def _apply(op, P, scale):
    lower, diag, upper = op
    out = P + scale * diag[:, None] * P
    out[:-1] += scale * upper[:-1, None] * P[1:]
    out[1:] += scale * lower[1:, None] * P[:-1]
    return out


def _solve(op, rhs, scale):
    lower, diag, upper = op
    n = diag.size
    ab = np.zeros((3, n))
    ab[0, 1:] = -scale * upper[:-1]
    ab[1] = 1.0 - scale * diag
    ab[2, :-1] = -scale * lower[1:]
    return solve_banded((1, 1), ab, rhs, overwrite_b=True, check_finite=False)


def evolve_forward(coeffs, grid, P, s, t, n_steps, rannacher=True):
    """Crank-Nicolson evolution of density columns ``P`` from s to t."""
    dt = (t - s) / n_steps
    time = s
    steps = n_steps
    if rannacher and n_steps >= 1:
        # two implicit-Euler half steps damp the nonsmooth initial data
        for _ in range(2):
            op = _fp_operator(coeffs, time + 0.5 * dt, grid)
            P = _solve(op, P.copy(), 0.5 * dt)
            time += 0.5 * dt
        steps -= 1
    for _ in range(steps):
        op = _fp_operator(coeffs, time + 0.5 * dt, grid)
        P = _solve(op, _apply(op, P, 0.5 * dt), 0.5 * dt)
        time += dt
    return P


def pde_kernel(coeffs: CoefficientField, source_grid, target_grid, s, t, n_steps, *,
               leak_band=0.02, leak_tol=0.01) -> TransitionKernel:
    """Kernel from a Crank-Nicolson solve of the forward equation on the target box.

    Every source starts as a normalized cell indicator; rows are renormalized
    afterwards and the factors kept in ``normalization``.
    """
    if not t > s:
        raise KernelError("pde_kernel needs t > s")
    if n_steps < 1:
        raise KernelError("n_steps must be >= 1")
    grid = as_grid(target_grid)
    x = as_points(source_grid)
    P = evolve_forward(coeffs, grid, _initial_rows(x, grid), s, t, n_steps)
    mass = P.sum(axis=0) * grid.h
    band = max(1, int(round(leak_band * grid.n)))
    edge_mass = (P[:band].sum(axis=0) + P[-band:].sum(axis=0)) * grid.h
    # rows started near a wall are reflected kernels by construction; leakage is
    # judged on sources a few diffusion lengths inside the box
    tau = t - s
    a_max = max(float(np.max(coeffs.a_at(tt, grid.centers))) for tt in (s, 0.5 * (s + t), t))
    xi_max = max(float(np.max(np.abs(coeffs.xi_at(tt, grid.edges)))) for tt in (s, 0.5 * (s + t), t))
    reach = 5.0 * math.sqrt(a_max * tau) + xi_max * tau
    core = (x - grid.grid_min >= reach) & (grid.grid_max - x >= reach)
    if not np.any(core):
        raise KernelError(f"domain narrower than the diffusion reach {2 * reach:.3g}; widen the domain")
    worst = float(edge_mass[core].max())
    if worst > leak_tol:
        raise KernelError(
            f"mass {worst:.3g} reached the boundary band (limit {leak_tol}); widen the domain"
        )
    interior = P[band:-band] if grid.n > 2 * band else P
    if np.any(interior <= 0):
        raise KernelError("non-positive kernel values in the interior; refine the time step")
    log.debug("pde_kernel row mass before normalization: min %.3e max %.3e", mass.min(), mass.max())
    K = (P / mass[None, :]).T
    with np.errstate(divide="ignore"):
        lv = np.log(np.where(K > 0, K, 0.0))
    return TransitionKernel(x, grid, lv, float(s), float(t), normalization=mass, kind="pde")


def kernel_to_terminal(kind, coeffs, grid, time_grid, n_steps_per_unit=1000):
    """Kernels ``K(t_k -> t_end)`` for each time-grid node, identity at the end."""
    times = np.asarray(time_grid, dtype=float)
    t_end = times[-1]
    out = []
    for tk in times:
        if tk >= t_end:
            out.append(identity_kernel(grid, t_end))
        else:
            out.append(make_kernel(kind, coeffs, grid, grid, tk, t_end, n_steps_per_unit))
    return out


def kernel_from_start(kind, coeffs, grid, time_grid, source=None, n_steps_per_unit=1000):
    """Kernels ``K(t_0 -> t_k)`` for each node, identity at the start."""
    times = np.asarray(time_grid, dtype=float)
    out = []
    for tk in times:
        if tk <= times[0]:
            out.append(identity_kernel(grid, times[0]))
        else:
            out.append(make_kernel(kind, coeffs, grid if source is None else source, grid, times[0], tk,
                                   n_steps_per_unit))
    return out


def make_kernel(kind, coeffs, source, target, s, t, n_steps_per_unit=1000):
    if kind == "gaussian":
        if not coeffs.is_constant:
            raise KernelError("the closed-form kernel needs constant coefficients")
        return gaussian_kernel(coeffs.a_const, source, target, s, t, xi=coeffs.xi_const)
    if kind == "pde":
        steps = max(1, int(round((t - s) * n_steps_per_unit)))
        return pde_kernel(coeffs, source, target, s, t, steps)
    raise KernelError(f"unknown kernel kind {kind!r}")


@dataclass(frozen=True)
class BoundCheck:
    satisfied: bool
    worst_lower_slack: float
    worst_upper_slack: float
    worst_lower_pair: tuple
    worst_upper_pair: tuple
    constants: GaussBoundConstants


def _neglog_and_d2(K):
    if not K.is_positive():
        raise KernelError("kernel must be strictly positive")
    g = -K.log_values
    d2 = (K.target.centers[None, :] - K.source_points[:, None]) ** 2
    return g, d2


def check_gaussian_bounds(K: TransitionKernel, c: GaussBoundConstants) -> BoundCheck:
    """Check -C1 + |x-y|^2/C2 <= -log K <= C1 + C2 |x-y|^2 on every grid pair."""
    g, d2 = _neglog_and_d2(K)
    lower = g - (-c.C1 + d2 / c.C2)
    upper = (c.C1 + c.C2 * d2) - g
    il = np.unravel_index(np.argmin(lower), lower.shape)
    iu = np.unravel_index(np.argmin(upper), upper.shape)
    wl, wu = float(lower[il]), float(upper[iu])
    return BoundCheck(bool(wl >= 0 and wu >= 0), wl, wu, tuple(int(i) for i in il), tuple(int(i) for i in iu), c)


def fit_bound_constants(K: TransitionKernel) -> GaussBoundConstants:
    """Grid-tight constants: C2 from the quadratic-growth envelopes, then minimal C1."""
    g, d2 = _neglog_and_d2(K)
    far = d2 > 0
    if not np.any(far):
        raise KernelError("need at least one pair at positive distance")
    ratio = (g - g.min(axis=1, keepdims=True))[far] / d2[far]
    rmax, rmin = float(ratio.max()), float(ratio.min())
    if not rmin > 0:
        raise KernelError("kernel does not decay quadratically on this grid")
    C2 = max(rmax, 1.0 / rmin)
    C1 = max(float(np.max(g - C2 * d2)), float(np.max(d2 / C2 - g)), 0.0)
    return GaussBoundConstants(C1, C2)
