"""Discrete probability measures on grids and atoms.

Grid measures hold cell masses on a regular grid; the density of a cell is its
mass divided by the cell volume. Atomic measures hold weighted point masses.
Distribution functions built from grids are piecewise linear (mass spread
uniformly over each cell), those built from atoms are step functions.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

SUM_TOL = 1e-12


class MeasureError(ValueError):
    pass


def _as_axes(value, ndim):
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.size == 1 and ndim > 1:
        arr = np.repeat(arr, ndim)
    if arr.shape != (ndim,):
        raise MeasureError(f"expected {ndim} axis values, got shape {arr.shape}")
    return tuple(float(v) for v in arr)


def _check_weights(w):
    if not np.all(np.isfinite(w)):
        raise MeasureError("weights must be finite")
    if np.any(w < 0):
        raise MeasureError("weights must be nonnegative")
    total = math.fsum(w.ravel())
    if abs(total - 1.0) > SUM_TOL:
        raise MeasureError(f"weights sum to {total!r}, expected 1")


@dataclass(frozen=True)
class Grid:
    """Geometry of a regular 1-D grid: ``n`` cells of width ``cell_width``."""

    grid_min: float
    cell_width: float
    n: int

    def __post_init__(self):
        if not self.cell_width > 0:
            raise MeasureError("cell_width must be positive")
        if self.n < 1:
            raise MeasureError("grid needs at least one cell")

    @classmethod
    def from_bounds(cls, lo, hi, n):
        return cls(float(lo), (float(hi) - float(lo)) / n, int(n))

    @property
    def h(self):
        return self.cell_width

    @property
    def grid_max(self):
        return self.grid_min + self.n * self.cell_width

    @property
    def centers(self):
        return self.grid_min + (np.arange(self.n) + 0.5) * self.cell_width

    @property
    def edges(self):
        return self.grid_min + np.arange(self.n + 1) * self.cell_width

    def cell_index(self, x):
        """Index of the cell containing ``x`` (right edge belongs to the last cell)."""
        x = np.asarray(x, dtype=float)
        idx = np.floor((x - self.grid_min) / self.cell_width).astype(np.int64)
        idx = np.where(x == self.grid_max, self.n - 1, idx)
        return idx

    def to_dict(self):
        return {"grid_min": self.grid_min, "cell_width": self.cell_width, "n": self.n}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["grid_min"]), float(d["cell_width"]), int(d["n"]))


class GridMeasure:
    """Probability weights on a regular 1-D or 2-D grid."""

    def __init__(self, grid_min, cell_width, weights, *, normalize=False):
        w = np.array(weights, dtype=float)
        if w.ndim not in (1, 2) or w.size == 0:
            raise MeasureError("weights must be a nonempty 1-D or 2-D array")
        if normalize:
            total = w.sum()
            if not total > 0:
                raise MeasureError("cannot normalize zero mass")
            w = w / total
        _check_weights(w)
        self.grid_min = _as_axes(grid_min, w.ndim)
        self.cell_width = _as_axes(cell_width, w.ndim)
        if min(self.cell_width) <= 0:
            raise MeasureError("cell_width must be positive")
        w.setflags(write=False)
        self.weights = w

    # construction helpers
    @classmethod
    def on_grid(cls, grid: Grid, weights, normalize=False):
        return cls(grid.grid_min, grid.cell_width, weights, normalize=normalize)

    @classmethod
    def from_density(cls, density, grid: Grid):
        """Midpoint-rule masses of an unnormalized density, renormalized."""
        return cls.on_grid(grid, np.asarray(density(grid.centers), dtype=float), normalize=True)

    @classmethod
    def from_cdf(cls, cdf, grid: Grid):
        """Exact cell masses from a distribution function, renormalized to the box."""
        return cls.on_grid(grid, np.diff(cdf(grid.edges)), normalize=True)

    @classmethod
    def from_distribution(cls, dist, grid: Grid):
        """Cell masses of a frozen scipy distribution, accurate in both tails."""
        e = grid.edges
        lower = np.diff(dist.cdf(e))
        upper = -np.diff(dist.sf(e))
        return cls.on_grid(grid, np.maximum(lower, upper), normalize=True)

    @classmethod
    def uniform(cls, grid: Grid):
        return cls.on_grid(grid, np.full(grid.n, 1.0 / grid.n), normalize=True)

    @classmethod
    def point(cls, grid: Grid, x):
        w = np.zeros(grid.n)
        w[int(grid.cell_index(x))] = 1.0
        return cls.on_grid(grid, w)

    @property
    def ndim(self):
        return self.weights.ndim

    @property
    def cell_volume(self):
        return float(np.prod(self.cell_width))

    @property
    def grid(self) -> Grid:
        self._require_1d()
        return Grid(self.grid_min[0], self.cell_width[0], self.weights.size)

    @property
    def centers(self):
        return self.grid.centers

    @property
    def density(self):
        return self.weights / self.cell_volume

    def _require_1d(self):
        if self.ndim != 1:
            raise MeasureError("operation needs a 1-D grid measure")

    def as_atoms(self) -> "DiscreteMeasure":
        """Atoms at cell centers carrying the cell masses."""
        return DiscreteMeasure(self.centers, self.weights)

    def same_grid(self, other, tol=0.0):
        return (
            self.weights.shape == other.weights.shape
            and np.allclose(self.grid_min, other.grid_min, rtol=0, atol=tol)
            and np.allclose(self.cell_width, other.cell_width, rtol=0, atol=tol)
        )

    def __repr__(self):
        return f"GridMeasure(grid_min={self.grid_min}, cell_width={self.cell_width}, n={self.weights.shape})"

    # serialization
    def to_json(self):
        return json.dumps(
            {
                "grid_min": list(self.grid_min),
                "cell_width": list(self.cell_width),
                "weights": self.weights.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(d["grid_min"], d["cell_width"], d["weights"])

    def to_csv(self, header_lines=()):
        self._require_1d()
        buf = io.StringIO()
        for line in header_lines:
            buf.write(f"# {line}\n")
        buf.write(f"# grid_min={self.grid_min[0]!r} cell_width={self.cell_width[0]!r}\n")
        buf.write("index,location,weight\n")
        for i, (x, w) in enumerate(zip(self.centers, self.weights)):
            buf.write(f"{i},{float(x)!r},{float(w)!r}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        meta = {}
        rows = []
        for line in text.splitlines():
            if line.startswith("#"):
                for tok in line[1:].split():
                    if "=" in tok:
                        k, v = tok.split("=", 1)
                        meta[k] = v
            elif line.strip():
                rows.append(line)
        reader = csv.DictReader(rows)
        weights = [float(r["weight"]) for r in reader]
        if "grid_min" not in meta or "cell_width" not in meta:
            raise MeasureError("grid CSV lacks the grid_min/cell_width header")
        return cls(float(meta["grid_min"]), float(meta["cell_width"]), weights)


class DiscreteMeasure:
    """Finitely many weighted atoms; 1-D atoms are kept sorted by location."""

    def __init__(self, locations, weights=None, *, normalize=False):
        x = np.array(locations, dtype=float)
        if x.ndim == 0:
            x = x[None]
        if x.shape[0] == 0:
            raise MeasureError("need at least one atom")
        if weights is None:
            w = np.full(x.shape[0], 1.0 / x.shape[0])
        else:
            w = np.array(weights, dtype=float).ravel()
        if w.shape[0] != x.shape[0]:
            raise MeasureError("locations and weights differ in length")
        if not np.all(np.isfinite(x)):
            raise MeasureError("locations must be finite")
        if normalize:
            w = w / w.sum()
        _check_weights(w)
        if x.ndim == 1:
            order = np.argsort(x, kind="stable")
            x, w = x[order], w[order]
        x.setflags(write=False)
        w.setflags(write=False)
        self.locations = x
        self.weights = w

    @classmethod
    def point(cls, x):
        return cls([x], [1.0])

    @property
    def ndim(self):
        return 1 if self.locations.ndim == 1 else self.locations.shape[1]

    def __len__(self):
        return self.locations.shape[0]

    def __repr__(self):
        return f"DiscreteMeasure(n_atoms={len(self)})"

    def to_csv(self, header_lines=()):
        if self.ndim != 1:
            raise MeasureError("CSV export is for 1-D atoms")
        buf = io.StringIO()
        for line in header_lines:
            buf.write(f"# {line}\n")
        buf.write("location,weight\n")
        for x, w in zip(self.locations, self.weights):
            buf.write(f"{float(x)!r},{float(w)!r}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        rows = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
        recs = list(csv.DictReader(rows))
        return cls([float(r["location"]) for r in recs], [float(r["weight"]) for r in recs])

    def to_json(self):
        return json.dumps({"locations": self.locations.tolist(), "weights": self.weights.tolist()})

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(d["locations"], d["weights"])


def load_measure_csv(text):
    """Read either CSV flavor, deciding from the header."""
    if "grid_min=" in text:
        return GridMeasure.from_csv(text)
    return DiscreteMeasure.from_csv(text)


# ---------------------------------------------------------------------------
# entropies and moments


def entropy(P: GridMeasure) -> float:
    """Discrete analogue of the integral of p log p, with density = mass / volume."""
    w = P.weights.ravel()
    pos = w > 0
    return float(np.sum(w[pos] * np.log(w[pos] / P.cell_volume)))


def relative_entropy(mu, nu) -> float:
    """Sum of mu log(mu/nu) with 0 log 0 = 0; +inf without absolute continuity."""
    m = mu.weights if hasattr(mu, "weights") else np.asarray(mu, dtype=float)
    n = nu.weights if hasattr(nu, "weights") else np.asarray(nu, dtype=float)
    if m.shape != n.shape:
        raise MeasureError(f"shape mismatch: {m.shape} vs {n.shape}")
    pos = m > 0
    if np.any(n[pos] <= 0):
        return math.inf
    return float(np.sum(m[pos] * (np.log(m[pos]) - np.log(n[pos]))))


def _atoms(P):
    if isinstance(P, GridMeasure):
        P._require_1d()
        return P.centers, P.weights
    if isinstance(P, DiscreteMeasure):
        return P.locations, P.weights
    raise MeasureError(f"not a measure: {type(P).__name__}")


def moments(P):
    """(mean, second moment, variance) of a 1-D measure; grid mass sits at centers."""
    x, w = _atoms(P)
    if x.ndim != 1:
        raise MeasureError("moments are 1-D")
    mean = float(np.dot(w, x))
    second = float(np.dot(w, x * x))
    var = float(np.dot(w, (x - mean) ** 2))
    return mean, second, var


# ---------------------------------------------------------------------------
# distribution functions


@dataclass(frozen=True)
class DistributionFunction:
    """Right-continuous distribution function.

    ``kind == "step"``: atoms at ``knots`` with cumulative masses ``cum``
    (cum[k] = F(knots[k])).
    ``kind == "linear"``: knots are cell edges, ``cum[k] = F(knots[k])``, linear between.
    """

    kind: str
    knots: np.ndarray
    cum: np.ndarray
    masses: np.ndarray = field(repr=False)

    @classmethod
    def of(cls, P):
        if isinstance(P, GridMeasure):
            P._require_1d()
            cum = np.concatenate([[0.0], np.cumsum(P.weights)])
            cum = np.minimum(cum / cum[-1], 1.0)
            return cls("linear", P.grid.edges, cum, np.asarray(P.weights))
        if isinstance(P, DiscreteMeasure):
            if P.ndim != 1:
                raise MeasureError("distribution functions are 1-D")
            cum = np.cumsum(P.weights)
            cum = np.minimum(cum / cum[-1], 1.0)
            return cls("step", np.asarray(P.locations), cum, np.asarray(P.weights))
        raise MeasureError(f"not a measure: {type(P).__name__}")

    @property
    def atomless(self):
        return self.kind == "linear"

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "step":
            k = np.searchsorted(self.knots, x, side="right")
            return np.where(k == 0, 0.0, self.cum[np.maximum(k - 1, 0)])
        return np.interp(x, self.knots, self.cum, left=0.0, right=1.0)

    def quantile(self, v):
        """Quasi-inverse inf{x : F(x) >= v}, vectorized, without range checks."""
        v = np.asarray(v, dtype=float)
        if self.kind == "step":
            k = np.searchsorted(self.cum, v, side="left")
            return self.knots[np.minimum(k, self.knots.size - 1)]
        cum = self.cum
        k = np.searchsorted(cum, v, side="left")
        k = np.clip(k, 1, cum.size - 1)
        lo, hi = cum[k - 1], cum[k]
        frac = np.where(hi > lo, (v - lo) / np.where(hi > lo, hi - lo, 1.0), 1.0)
        return self.knots[k - 1] + frac * (self.knots[k] - self.knots[k - 1])

    def segments(self):
        """Quantile function as pieces on [0,1]: breaks, left value, right value.

        The quantile is linear on each (breaks[s], breaks[s+1]) from qa[s] to qb[s].
        Zero-length pieces are dropped.
        """
        if self.kind == "step":
            lo = np.concatenate([[0.0], self.cum[:-1]])
            hi = self.cum.copy()
            qa = qb = self.knots
        else:
            lo, hi = self.cum[:-1], self.cum[1:]
            qa, qb = self.knots[:-1], self.knots[1:]
        keep = hi > lo
        lo, hi, qa, qb = lo[keep], hi[keep], qa[keep], qb[keep]
        hi[-1] = 1.0
        breaks = np.concatenate([[0.0], hi])
        return breaks, np.asarray(qa, dtype=float), np.asarray(qb, dtype=float)


def quasi_inverse(F: DistributionFunction, v):
    """inf{x : F(x) >= v} for v in (0,1)."""
    arr = np.asarray(v, dtype=float)
    if np.any(~(arr > 0)) or np.any(~(arr < 1)):
        raise MeasureError("quasi_inverse needs 0 < v < 1")
    out = F.quantile(arr)
    return float(out) if out.ndim == 0 else out


def _segment_values(breaks, qa, qb, u0, u1):
    """Quantile values at the ends of each sub-interval [u0, u1] of one piece."""
    mid = 0.5 * (u0 + u1)
    s = np.clip(np.searchsorted(breaks, mid, side="right") - 1, 0, qa.size - 1)
    length = breaks[s + 1] - breaks[s]
    slope = (qb - qa)[s] / length
    return qa[s] + slope * (u0 - breaks[s]), qa[s] + slope * (u1 - breaks[s])


def quantile_integral(F: DistributionFunction, v0, v1):
    """Exact integral of the quantile function of F over [v0, v1] (vectorized)."""
    breaks, qa, qb = F.segments()
    # antiderivative at the breaks
    seg_int = 0.5 * (qa + qb) * np.diff(breaks)
    anti = np.concatenate([[0.0], np.cumsum(seg_int)])

    def A(v):
        v = np.clip(np.asarray(v, dtype=float), 0.0, 1.0)
        s = np.clip(np.searchsorted(breaks, v, side="right") - 1, 0, qa.size - 1)
        d = v - breaks[s]
        length = breaks[s + 1] - breaks[s]
        slope = (qb[s] - qa[s]) / length
        return anti[s] + qa[s] * d + 0.5 * slope * d * d

    return A(v1) - A(v0)


def wasserstein2_1d(P, Q) -> float:
    """Exact W2 between two 1-D measures from their piecewise quantile functions."""
    for M in (P, Q):
        if isinstance(M, GridMeasure) and M.ndim != 1:
            raise MeasureError("wasserstein2_1d is 1-D; use kantorovich_discrete")
        if isinstance(M, DiscreteMeasure) and M.ndim != 1:
            raise MeasureError("wasserstein2_1d is 1-D; use kantorovich_discrete")
    FP, FQ = DistributionFunction.of(P), DistributionFunction.of(Q)
    bP, aP, cP = FP.segments()
    bQ, aQ, cQ = FQ.segments()
    u = np.union1d(bP, bQ)
    u0, u1 = u[:-1], u[1:]
    keep = u1 > u0
    u0, u1 = u0[keep], u1[keep]
    p0, p1 = _segment_values(bP, aP, cP, u0, u1)
    q0, q1 = _segment_values(bQ, aQ, cQ, u0, u1)
    d0, d1 = p0 - q0, p1 - q1
    total = np.sum((u1 - u0) * (d0 * d0 + d0 * d1 + d1 * d1) / 3.0)
    return float(math.sqrt(max(total, 0.0)))


def quadratic_cost(x, y):
    """Squared Euclidean distance on broadcast location arrays."""
    d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    return d * d if d.ndim == 2 else np.sum(d * d, axis=-1)


def _pairwise_cost(cost, X, Y):
    if X.ndim == 1:
        return np.asarray(cost(X[:, None], Y[None, :]), dtype=float)
    return np.asarray(cost(X[:, None, :], Y[None, :, :]), dtype=float)


def kantorovich_discrete(P: DiscreteMeasure, Q: DiscreteMeasure, cost=None):
    """Exact optimal transport between two atomic measures (LP, dual simplex).

    Returns (value, coupling matrix). ``cost`` maps broadcast location arrays to
    costs; the default is the squared Euclidean distance.
    """
    a = np.asarray(P.weights, dtype=float)
    b = np.asarray(Q.weights, dtype=float)
    for w in (a, b):
        if np.any(w < 0) or abs(math.fsum(w) - 1.0) > SUM_TOL:
            raise MeasureError("kantorovich_discrete needs normalized weights")
    if P.ndim != Q.ndim:
        raise MeasureError("measures live in different dimensions")
    C = _pairwise_cost(quadratic_cost if cost is None else cost, P.locations, Q.locations)
    n, m = C.shape
    rows = sp.kron(sp.eye(n), np.ones((1, m)))
    cols = sp.kron(np.ones((1, n)), sp.eye(m))
    res = linprog(
        C.ravel(),
        A_eq=sp.vstack([rows, cols]).tocsr(),
        b_eq=np.concatenate([a, b]),
        bounds=(0, None),
        method="highs-ds",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if res.status != 0:
        raise MeasureError(f"transport LP failed: {res.message}")
    plan = np.maximum(res.x.reshape(n, m), 0.0)
    return float(np.sum(plan * C)), plan
