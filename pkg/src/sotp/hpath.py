"""h-path drift, Euler-Maruyama simulation, Fokker-Planck checks and primal costs."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy.special import logsumexp

from .bridge import SchrodingerPotentials
from .kernel import TransitionKernel
from .measures import DiscreteMeasure, Grid, GridMeasure, wasserstein2_1d


def time_weights(time_grid):
    """Trapezoid weights on a time grid."""
    t = np.asarray(time_grid, dtype=float)
    w = np.zeros_like(t)
    dt = np.diff(t)
    w[:-1] += 0.5 * dt
    w[1:] += 0.5 * dt
    return w


def _interp_rows(nodes, values, x):
    """Linear interpolation along x with nearest-edge extrapolation."""
    return np.interp(x, nodes, values)


@dataclass(frozen=True)
class MarginalFlow:
    time_grid: np.ndarray
    grid: Grid
    weights: np.ndarray
    mass_defect: float = 0.0

    def __post_init__(self):
        w = np.asarray(self.weights)
        if w.shape != (len(self.time_grid), self.grid.n):
            raise ValueError(f"flow weights have shape {w.shape}")
        if np.any(w < 0) or np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("every slice must be a probability vector")

    @classmethod
    def from_measures(cls, time_grid, measures):
        grid = measures[0].grid
        return cls(np.asarray(time_grid, dtype=float), grid, np.vstack([m.weights for m in measures]))

    @classmethod
    def from_masses(cls, time_grid, grid, masses):
        """Renormalize slices, recording the largest relative correction."""
        m = np.asarray(masses, dtype=float)
        tot = m.sum(axis=1)
        return cls(np.asarray(time_grid, dtype=float), grid, m / tot[:, None], float(np.max(np.abs(tot - 1.0))))

    def measure(self, k) -> GridMeasure:
        return GridMeasure.on_grid(self.grid, self.weights[k])

    @property
    def measures(self):
        return [self.measure(k) for k in range(len(self.time_grid))]

    @property
    def densities(self):
        return self.weights / self.grid.h

    def neighbor_w2(self):
        """W2 between consecutive slices (weak-continuity diagnostic)."""
        ms = self.measures
        return np.array([wasserstein2_1d(ms[k], ms[k + 1]) for k in range(len(ms) - 1)])


@dataclass(frozen=True)
class DriftField:
    """Drift values at (time node, cell center); ``mask`` marks cells with data."""

    time_grid: np.ndarray
    grid: Grid
    values: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        if np.shape(self.values) != (len(self.time_grid), self.grid.n):
            raise ValueError("drift values do not match the grids")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("drift values must be finite")

    @classmethod
    def constant(cls, time_grid, grid, c):
        return cls(np.asarray(time_grid, dtype=float), grid, np.full((len(time_grid), grid.n), float(c)))

    def at(self, t, x):
        """Bilinear lookup in (t, x), clamped to the grid box."""
        tg = self.time_grid
        centers = self.grid.centers
        if t <= tg[0]:
            return _interp_rows(centers, self.values[0], x)
        if t >= tg[-1]:
            return _interp_rows(centers, self.values[-1], x)
        k = int(np.searchsorted(tg, t, side="right") - 1)
        lam = (t - tg[k]) / (tg[k + 1] - tg[k])
        lo = _interp_rows(centers, self.values[k], x)
        if lam == 0.0:
            return lo
        hi = _interp_rows(centers, self.values[k + 1], x)
        return (1.0 - lam) * lo + lam * hi


@dataclass(frozen=True)
class HFunction:
    time_grid: np.ndarray
    grid: Grid
    log_values: np.ndarray

    @property
    def values(self):
        return np.exp(self.log_values)


# ---------------------------------------------------------------------------
# h-path construction


def _log_nu1(nu1):
    if isinstance(nu1, SchrodingerPotentials):
        return nu1.log_nu1
    arr = np.asarray(nu1, dtype=float)
    with np.errstate(divide="ignore"):
        return np.log(arr)


def h_function(kernels, nu1) -> HFunction:
    """h(t_k, x_i) = sum_j K_{t_k}[i, j] nu1_j for kernels ending at the terminal time."""
    lnu1 = _log_nu1(nu1)
    rows = [logsumexp(K.log_values + lnu1[None, :], axis=1) for K in kernels]
    lh = np.vstack(rows)
    if not np.all(np.isfinite(lh)):
        raise ValueError("h is not strictly positive; kernel defect or empty potential support")
    times = np.array([K.s for K in kernels])
    return HFunction(times, kernels[0].target, lh)


def grid_coefficient(coeffs, name, t, x):
    fn = getattr(coeffs, f"{name}_at")
    return np.asarray(fn(t, x), dtype=float)


def hpath_drift(h: HFunction, coeffs) -> DriftField:
    """b = a d/dx log h + xi with second-order central differences."""
    x = h.grid.centers
    dlog = np.gradient(h.log_values, h.grid.h, axis=1, edge_order=2)
    vals = np.vstack([
        grid_coefficient(coeffs, "a", t, x) * dlog[k] + grid_coefficient(coeffs, "xi", t, x)
        for k, t in enumerate(h.time_grid)
    ])
    return DriftField(h.time_grid, h.grid, vals)


def bridge_flow(potentials: SchrodingerPotentials, forward_kernels, h: HFunction) -> MarginalFlow:
    """Marginals of the bridge on the grid: (nu0 K_{0,t})_i h(t, x_i) times the cell width."""
    rows = []
    for K, lh in zip(forward_kernels, h.log_values):
        lp = logsumexp(potentials.log_nu0[:, None] + K.log_values, axis=0) + lh + math.log(h.grid.h)
        rows.append(np.exp(lp))
    return MarginalFlow.from_masses(h.time_grid, h.grid, np.vstack(rows))


# ---------------------------------------------------------------------------
# simulation


@dataclass
class PathEnsemble:
    seed: int
    dt: float
    times: np.ndarray
    paths: np.ndarray
    controls: np.ndarray
    record_stride: int = 1
    block_size: int = 8192
    exit_count: int = 0
    exit_fraction: float = 0.0
    running_cost: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_paths(self):
        return self.paths.shape[0]

    def time_index(self, t):
        hit = np.flatnonzero(np.isclose(self.times, t, rtol=0, atol=1e-9))
        if hit.size == 0:
            raise ValueError(f"time {t} was not recorded")
        return int(hit[0])

    def save(self, meta_path):
        """Raw little-endian float64 arrays plus a JSON sidecar."""
        base = str(meta_path)
        base = base[: -len(".meta.json")] if base.endswith(".meta.json") else base.rsplit(".", 1)[0]
        files = {"paths": base + ".paths.f64", "controls": base + ".controls.f64"}
        self.paths.astype("<f8").tofile(files["paths"])
        self.controls.astype("<f8").tofile(files["controls"])
        if self.running_cost is not None:
            files["running_cost"] = base + ".cost.f64"
            self.running_cost.astype("<f8").tofile(files["running_cost"])
        meta = {
            "shape": list(self.paths.shape),
            "seed": self.seed,
            "dt": self.dt,
            "times": self.times.tolist(),
            "record_stride": self.record_stride,
            "block_size": self.block_size,
            "exit_count": self.exit_count,
            "exit_fraction": self.exit_fraction,
            "files": {k: v.rsplit("/", 1)[-1] for k, v in files.items()},
        }
        with open(meta_path, "w") as fh:
            json.dump(meta, fh, indent=1)

    @classmethod
    def load(cls, meta_path):
        with open(meta_path) as fh:
            meta = json.load(fh)
        d = str(meta_path).rsplit("/", 1)
        root = "" if len(d) == 1 else d[0] + "/"
        shape = tuple(meta["shape"])

        def arr(key, shp):
            return np.fromfile(root + meta["files"][key], dtype="<f8").reshape(shp)

        cost = arr("running_cost", (shape[0],)) if "running_cost" in meta["files"] else None
        return cls(meta["seed"], meta["dt"], np.asarray(meta["times"]), arr("paths", shape), arr("controls", shape),
                   meta["record_stride"], meta["block_size"], meta["exit_count"], meta["exit_fraction"], cost)


def block_rng(seed, block):
    """Counter-based stream for one block of paths."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(block)])))


def _sample_initial(P0, n, rng, within_cell):
    if isinstance(P0, GridMeasure):
        cum = np.cumsum(P0.weights)
        cum /= cum[-1]
        idx = np.minimum(np.searchsorted(cum, rng.random(n), side="right"), cum.size - 1)
        x = P0.centers[idx]
        if within_cell:
            x = x + (rng.random(n) - 0.5) * P0.grid.h
        return x
    if isinstance(P0, DiscreteMeasure):
        cum = np.cumsum(P0.weights)
        cum /= cum[-1]
        idx = np.minimum(np.searchsorted(cum, rng.random(n), side="right"), cum.size - 1)
        return P0.locations[idx].astype(float)
    x0 = float(P0)
    return np.full(n, x0)


def _reflect(x, lo, hi):
    out = (x < lo) | (x > hi)
    if np.any(out):
        x = np.where(x < lo, 2 * lo - x, x)
        x = np.where(x > hi, 2 * hi - x, x)
        x = np.clip(x, lo, hi)
    return x, out


def euler_maruyama(drift: DriftField, coeffs, P0, N, dt, seed, *, record_stride=1, cost=None,
                   block_size=8192, within_cell=False, exit_warn=0.01) -> PathEnsemble:
    """Simulate X_{k+1} = X_k + b dt + sigma sqrt(dt) Z with per-block Philox streams.

    ``cost(t, x, u)`` (optional) is accumulated online with the left-point rule.
    Paths leaving the drift's box are reflected and counted.
    """
    if N < 1:
        raise ValueError("need at least one path")
    tg = np.asarray(drift.time_grid, dtype=float)
    T0, T1 = float(tg[0]), float(tg[-1])
    n_steps = int(round((T1 - T0) / dt))
    ratios = np.diff(tg) / dt
    if n_steps < 1 or np.any(np.abs(ratios - np.round(ratios)) > 1e-6):
        raise ValueError("dt must divide every interval of the time grid")
    if n_steps % record_stride:
        raise ValueError("record_stride must divide the number of steps")
    n_rec = n_steps // record_stride + 1
    lo, hi = drift.grid.grid_min, drift.grid.grid_max
    paths = np.empty((N, n_rec))
    controls = np.empty((N, n_rec))
    acc = np.zeros(N) if cost is not None else None
    ever_out = np.zeros(N, dtype=bool)
    exit_count = 0
    sqdt = math.sqrt(dt)
    step_times = T0 + dt * np.arange(n_steps + 1)
    for b0 in range(0, N, block_size):
        b1 = min(N, b0 + block_size)
        n = b1 - b0
        rng = block_rng(seed, b0 // block_size)
        x = _sample_initial(P0, n, rng, within_cell)
        for k in range(n_steps + 1):
            t = step_times[k]
            beta = drift.at(t, x)
            if k % record_stride == 0:
                r = k // record_stride
                paths[b0:b1, r] = x
                controls[b0:b1, r] = beta
            if k == n_steps:
                break
            if acc is not None:
                acc[b0:b1] += np.asarray(cost(t, x, beta), dtype=float) * dt
            sig = np.sqrt(np.maximum(grid_coefficient(coeffs, "a", t, x), 0.0))
            z = rng.standard_normal(n)
            x = x + beta * dt + sig * sqdt * z
            x, out = _reflect(x, lo, hi)
            if out.any():
                exit_count += int(out.sum())
                ever_out[b0:b1] |= out
    frac = float(ever_out.mean())
    if frac > exit_warn:
        warnings.warn(f"{frac:.2%} of paths left the domain and were reflected", RuntimeWarning)
    rec_times = step_times[::record_stride]
    return PathEnsemble(int(seed), float(dt), rec_times, paths, controls, record_stride, block_size,
                        exit_count, frac, acc)


def empirical_marginal(ens: PathEnsemble, t) -> DiscreteMeasure:
    return DiscreteMeasure(ens.paths[:, ens.time_index(t)])


# ---------------------------------------------------------------------------
# Fokker-Planck weak form


class TestFunction(NamedTuple):
    name: str
    f: Callable
    df: Callable


def _damped_monomial(k, w):
    def f(x):
        return x ** k * np.exp(-x * x / (2 * w * w))

    def df(x):
        lead = k * x ** (k - 1) if k > 0 else 0.0
        return (lead - x ** (k + 1) / (w * w)) * np.exp(-x * x / (2 * w * w))

    return TestFunction(f"x^{k} exp(-x^2/(2*{w}^2))", f, df)


def _trig(kind, om):
    if kind == "sin":
        return TestFunction(f"sin({om}x)", lambda x: np.sin(om * x), lambda x: om * np.cos(om * x))
    return TestFunction(f"cos({om}x)", lambda x: np.cos(om * x), lambda x: -om * np.sin(om * x))


def default_test_family(widths=(1.0, 2.0), degree=4, freqs=(0.5, 1.0, 2.0)):
    """Damped monomials x^k exp(-x^2/2w^2), k <= degree, for two widths, plus sin/cos."""
    fam = [_damped_monomial(k, w) for w in widths for k in range(degree + 1)]
    fam += [_trig(kind, om) for om in freqs for kind in ("sin", "cos")]
    return fam


def _edge_ap(coeffs, k, t, grid, P):
    """Diffusion-times-density at interior edges (length n - 1)."""
    if hasattr(coeffs, "a_edges"):
        a_e = np.asarray(coeffs.a_edges(k), dtype=float)
        return a_e * 0.5 * (P[:-1] + P[1:]) / grid.h
    ap = grid_coefficient(coeffs, "a", t, grid.centers) * P
    return 0.5 * (ap[:-1] + ap[1:]) / grid.h


def generator_integrals(flow: MarginalFlow, coeffs, drift: DriftField, tests):
    """G[m, k] = sum over cells of (1/2 a f'' + b f') dP_{t_k} for each test function."""
    x = flow.grid.centers
    G = np.zeros((len(tests), len(flow.time_grid)))
    dfs = np.vstack([tf.df(x) for tf in tests])
    jumps = np.diff(dfs, axis=1)
    for k, t in enumerate(flow.time_grid):
        P = flow.weights[k]
        bP = drift.values[k] * P
        G[:, k] = dfs @ bP + 0.5 * jumps @ _edge_ap(coeffs, k, t, flow.grid, P)
    return G


def fokker_planck_residuals(flow: MarginalFlow, coeffs, drift: DriftField, tests=None):
    """Residual matrix (tests x times) of the weak Fokker-Planck equation."""
    if tests is None:
        tests = default_test_family()
    if len(drift.time_grid) != len(flow.time_grid) or not np.allclose(drift.time_grid, flow.time_grid):
        raise ValueError("flow and drift must share the time grid")
    x = flow.grid.centers
    fs = np.vstack([tf.f(x) for tf in tests])
    moments = fs @ flow.weights.T
    G = generator_integrals(flow, coeffs, drift, tests)
    dt = np.diff(flow.time_grid)
    integ = np.concatenate([np.zeros((len(tests), 1)), np.cumsum(0.5 * (G[:, 1:] + G[:, :-1]) * dt, axis=1)], axis=1)
    return moments - moments[:, :1] - integ


def fokker_planck_residual(flow: MarginalFlow, coeffs, drift: DriftField, tests=None) -> float:
    return float(np.max(np.abs(fokker_planck_residuals(flow, coeffs, drift, tests))))


# ---------------------------------------------------------------------------
# controls and costs


@dataclass(frozen=True)
class ControlMeasure:
    """Per-time weighted atoms (x, u, w) of a relaxed control."""

    time_grid: np.ndarray
    slices: tuple

    def __post_init__(self):
        if len(self.slices) != len(self.time_grid):
            raise ValueError("one slice per time node")
        for x, u, w in self.slices:
            if not (len(x) == len(u) == len(w)):
                raise ValueError("slice arrays differ in length")
            if np.any(np.asarray(w) < 0) or abs(math.fsum(w) - 1.0) > 1e-12:
                raise ValueError("slice weights must be a probability vector")

    @classmethod
    def from_flow(cls, flow: MarginalFlow, drift: DriftField):
        """Deterministic (delta) controls u = b(t, x) at occupied cell centers."""
        x = flow.grid.centers
        slices = []
        for k in range(len(flow.time_grid)):
            sel = _occupied(flow, drift, k)
            slices.append((x[sel], drift.values[k][sel], flow.weights[k][sel]))
        return cls(np.asarray(flow.time_grid, dtype=float), tuple(slices))

    @classmethod
    def from_ensemble(cls, ens: PathEnsemble):
        n = ens.n_paths
        w = np.full(n, 1.0 / n)
        return cls(ens.times, tuple((ens.paths[:, k], ens.controls[:, k], w) for k in range(len(ens.times))))


def _occupied(flow, drift, k):
    sel = flow.weights[k] > 0
    if drift.mask is not None:
        sel &= drift.mask[k]
    return sel


def conditional_drift(source, grid: Grid) -> DriftField:
    """Cellwise weighted mean of recorded controls; empty cells are 0 and masked out."""
    if isinstance(source, PathEnsemble):
        source = ControlMeasure.from_ensemble(source)
    vals = np.zeros((len(source.time_grid), grid.n))
    mask = np.zeros_like(vals, dtype=bool)
    for k, (x, u, w) in enumerate(source.slices):
        idx = np.clip(grid.cell_index(np.asarray(x)), 0, grid.n - 1)
        mass = np.bincount(idx, weights=w, minlength=grid.n)
        mom = np.bincount(idx, weights=np.asarray(w) * np.asarray(u), minlength=grid.n)
        occ = mass > 0
        vals[k, occ] = mom[occ] / mass[occ]
        mask[k] = occ
    return DriftField(np.asarray(source.time_grid, dtype=float), grid, vals, mask)


@dataclass(frozen=True)
class JensenReport:
    relaxed_cost: float
    reduced_cost: float
    gap: float
    holds: bool
    strict: bool | None


class JensenViolation(AssertionError):
    pass


def _reduce_slice(x, u, w):
    """Mass and conditional mean of u at each distinct location."""
    locs, inv = np.unique(np.asarray(x), return_inverse=True)
    mass = np.bincount(inv, weights=w)
    mean = np.bincount(inv, weights=np.asarray(w) * np.asarray(u)) / np.where(mass > 0, mass, 1.0)
    return locs, mean, mass


def jensen_reduction_check(nu: ControlMeasure, L, *, convex=True, strictly_convex=False, margin=0.0,
                           tol=1e-12) -> JensenReport:
    """Compare the relaxed cost with the cost of the conditional-mean control."""
    tw = time_weights(nu.time_grid)
    relaxed = cost_relaxed(nu, L)
    red = 0.0
    for k, (x, u, w) in enumerate(nu.slices):
        locs, mean, mass = _reduce_slice(x, u, w)
        red += tw[k] * float(np.sum(np.asarray(L(nu.time_grid[k], locs, mean), dtype=float) * mass))
    gap = relaxed - red
    holds = red <= relaxed + tol
    if convex and not holds:
        raise JensenViolation(f"reduced cost {red!r} exceeds relaxed cost {relaxed!r}")
    strict = None
    if strictly_convex:
        strict = gap >= margin
        if not strict:
            raise JensenViolation(f"gap {gap!r} below the required margin {margin!r}")
    return JensenReport(relaxed, red, gap, bool(holds), strict)


def mixture_drift(first, second, lam):
    """Convex mixture of two (flow, drift) pairs with the density-weighted drift."""
    (f0, d0), (f1, d1) = first, second
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    if lam == 0.0:
        return f0, d0
    if lam == 1.0:
        return f1, d1
    if f0.grid != f1.grid or not np.array_equal(f0.time_grid, f1.time_grid):
        raise ValueError("flows must share grids")
    p0, p1 = f0.weights, f1.weights
    p = (1.0 - lam) * p0 + lam * p1
    pb = (1.0 - lam) * p0 * d0.values + lam * p1 * d1.values
    pos = p > 0
    b = np.where(pos, pb / np.where(pos, p, 1.0), 0.0)
    flow = MarginalFlow(f0.time_grid, f0.grid, p / p.sum(axis=1, keepdims=True))
    return flow, DriftField(f0.time_grid, f0.grid, b, pos)


@dataclass(frozen=True)
class EnergyReport:
    fec: float
    gfec_gamma: float
    gfec: float


def energy(flow: MarginalFlow, coeffs, drift: DriftField, gamma=2.0) -> EnergyReport:
    """Quadratures of int <a^-1 b, b> dP_t dt and of its gamma/2 power."""
    if not gamma > 1:
        raise ValueError("gamma must exceed 1")
    tw = time_weights(flow.time_grid)
    x = flow.grid.centers
    fec = gfec = 0.0
    for k, t in enumerate(flow.time_grid):
        sel = _occupied(flow, drift, k)
        a = grid_coefficient(coeffs, "a", t, x)[sel]
        b = drift.values[k][sel]
        P = flow.weights[k][sel]
        active = b != 0
        if np.any(active & (a <= 0)):
            return EnergyReport(math.inf, gamma, math.inf)
        q = np.where(active, b * b / np.where(a > 0, a, 1.0), 0.0)
        fec += tw[k] * float(np.sum(q * P))
        gfec += tw[k] * float(np.sum(q ** (gamma / 2) * P))
    return EnergyReport(fec, float(gamma), gfec)


def schrodinger_cost(coeffs):
    """L(t, x; u) = (u - xi)^2 / (2a)."""

    def L(t, x, u):
        d = np.asarray(u) - grid_coefficient(coeffs, "xi", t, x)
        return d * d / (2.0 * grid_coefficient(coeffs, "a", t, x))

    return L


def cost_pathwise(ens: PathEnsemble, L=None) -> float:
    """Monte Carlo mean of sum_k L(t_k, X_k; beta_k) dt."""
    if L is None:
        if ens.running_cost is None:
            raise ValueError("no cost was accumulated during simulation")
        return float(np.mean(ens.running_cost))
    step = ens.record_stride * ens.dt
    total = np.zeros(ens.n_paths)
    for k in range(len(ens.times) - 1):
        total += np.asarray(L(ens.times[k], ens.paths[:, k], ens.controls[:, k]), dtype=float) * step
    return float(np.mean(total))


def cost_flow(flow: MarginalFlow, drift: DriftField, L) -> float:
    """Quadrature of int int L(t, x; b(t, x)) dP_t dt over occupied cells."""
    tw = time_weights(flow.time_grid)
    x = flow.grid.centers
    total = 0.0
    for k, t in enumerate(flow.time_grid):
        sel = _occupied(flow, drift, k)
        vals = np.asarray(L(t, x[sel], drift.values[k][sel]), dtype=float)
        total += tw[k] * float(np.sum(vals * flow.weights[k][sel]))
    return total


def cost_relaxed(nu: ControlMeasure, L) -> float:
    """Direct summation of int L d nu."""
    tw = time_weights(nu.time_grid)
    total = 0.0
    for k, (x, u, w) in enumerate(nu.slices):
        vals = np.asarray(L(nu.time_grid[k], np.asarray(x), np.asarray(u)), dtype=float)
        total += tw[k] * float(np.sum(vals * np.asarray(w)))
    return total
