"""Scenario configuration: TOML or JSON, defaults, validation, env overrides, hashing."""
from __future__ import annotations

import copy
import hashlib
import json
import os
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from scipy import stats

from .measures import Grid, GridMeasure, load_measure_csv

SUITES = ("kernel", "bridge", "hpath", "duality", "quantile", "regularity")
REGULARITY_SUITES = ("semiconcavity", "lipschitz", "displacement", "sandwich", "psi")
ENV_PREFIX = "SOT_"

DEFAULTS = {
    "grid": {"min": -6.0, "max": 6.0, "n": 240},
    "kernel": {"type": "gaussian", "a": 1.0, "xi": 0.0, "n_steps_per_unit": 1000},
    "time": {"n": 51},
    "marginals": {
        "P0": {"family": "gaussian", "mean": -0.5, "sd": 0.5},
        "P1": {"family": "gaussian", "mean": 0.5, "sd": 0.6},
    },
    "solver": {"tol": 1e-10, "max_iter": 10000},
    "simulation": {"N": 20000, "dt": 1e-3, "seed": 0, "block_size": 8192},
    "duality": {"n_random_f": 50, "hjb_margin": 1.5},
    "quantile": {"n_instances": 5, "n_times": 11, "grid": {"min": -6.0, "max": 8.0, "n": 280},
                 "simulate": True, "N": 20000, "dt": 1e-2, "C": 1.0},
    "regularity": {"n_instances": 5, "bin_width": 0.02, "box": 6.0, "n_omega": 64,
                   "suites": list(REGULARITY_SUITES)},
    "suites": {"run": list(SUITES)},
    "plots": {"enabled": True},
}


class ConfigError(ValueError):
    pass


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "marginals":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_scalar(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def env_overrides(environ=None):
    """SOT_SOLVER__TOL=1e-9 -> {"solver": {"tol": 1e-9}}; values parsed as JSON when possible."""
    environ = os.environ if environ is None else environ
    out = {}
    for key, val in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        path = [p.lower() for p in key[len(ENV_PREFIX):].split("__") if p]
        if not path:
            continue
        node = out
        for p in path[:-1]:
            node = node.setdefault(p, {})
        node[path[-1]] = _parse_scalar(val)
    return out


def read_config_file(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    if path.suffix == ".json":
        return json.loads(path.read_text())
    with open(path, "rb") as fh:
        return tomllib.load(fh)


class ScenarioConfig:
    """Validated scenario; ``data`` is the fully merged plain dict that is hashed."""

    def __init__(self, data, base_dir="."):
        self.data = _merge(DEFAULTS, data)
        self.base_dir = Path(base_dir)
        self.validate()

    @classmethod
    def load(cls, path=None, overrides=None, environ=None):
        raw = read_config_file(path) if path else {}
        raw = _merge(raw, env_overrides(environ))
        if overrides:
            raw = _merge(raw, overrides)
        return cls(raw, Path(path).parent if path else ".")

    def __getitem__(self, key):
        return self.data[key]

    def to_json(self):
        return json.dumps(self.data, sort_keys=True, indent=1)

    @property
    def hash(self):
        canon = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    # validation
    def validate(self):
        d = self.data
        g = d["grid"]
        if not (g["max"] > g["min"] and int(g["n"]) >= 3):
            raise ConfigError("grid needs max > min and n >= 3")
        for name, val in (("solver.tol", d["solver"]["tol"]), ("simulation.dt", d["simulation"]["dt"]),
                          ("kernel.a", d["kernel"]["a"])):
            if not (isinstance(val, (int, float)) and val > 0):
                raise ConfigError(f"{name} must be positive, got {val!r}")
        if int(d["solver"]["max_iter"]) < 1 or int(d["simulation"]["N"]) < 1:
            raise ConfigError("solver.max_iter and simulation.N must be at least 1")
        if d["kernel"]["type"] not in ("gaussian", "pde"):
            raise ConfigError(f"kernel.type must be 'gaussian' or 'pde', got {d['kernel']['type']!r}")
        if int(d["time"]["n"]) < 3:
            raise ConfigError("time.n must be at least 3")
        unknown = set(d["suites"]["run"]) - set(SUITES)
        if unknown:
            raise ConfigError(f"unknown suites {sorted(unknown)}")
        unknown = set(d["regularity"]["suites"]) - set(REGULARITY_SUITES)
        if unknown:
            raise ConfigError(f"unknown regularity suites {sorted(unknown)}")
        for key in ("P0", "P1"):
            if key not in d["marginals"]:
                raise ConfigError(f"marginals.{key} is missing")
            self._check_marginal(d["marginals"][key], key)

    def _check_marginal(self, entry, name):
        fam = entry.get("family")
        if fam == "file":
            if not (self.base_dir / entry["path"]).exists():
                raise ConfigError(f"marginals.{name}: file {entry['path']} does not exist")
        elif fam == "gaussian":
            if not entry.get("sd", 0) > 0:
                raise ConfigError(f"marginals.{name}: sd must be positive")
        elif fam == "uniform":
            if not entry.get("high", 0) > entry.get("low", 0):
                raise ConfigError(f"marginals.{name}: need high > low")
        elif fam == "mixture":
            comps = entry.get("components", [])
            if not comps:
                raise ConfigError(f"marginals.{name}: mixture needs components")
            for c in comps:
                self._check_marginal(c, name)
        elif fam == "prior_pushforward":
            if name != "P1":
                raise ConfigError("prior_pushforward is only valid for P1")
        else:
            raise ConfigError(f"marginals.{name}: unknown family {fam!r}")

    # derived objects
    @property
    def grid(self) -> Grid:
        g = self.data["grid"]
        return Grid.from_bounds(float(g["min"]), float(g["max"]), int(g["n"]))

    def coefficients(self):
        from .kernel import CoefficientField

        k = self.data["kernel"]
        return CoefficientField.constant(float(k["a"]), float(k["xi"]))

    def marginal(self, name, grid=None, kernel=None) -> GridMeasure:
        grid = grid or self.grid
        entry = self.data["marginals"][name]
        if entry["family"] == "prior_pushforward":
            if kernel is None:
                raise ConfigError("prior_pushforward needs the kernel")
            P0 = self.marginal("P0", grid)
            return prior_pushforward(P0, kernel)
        return build_measure(entry, grid, self.base_dir)


def build_measure(entry, grid: Grid, base_dir=".") -> GridMeasure:
    fam = entry["family"]
    if fam == "gaussian":
        return GridMeasure.from_distribution(stats.norm(entry.get("mean", 0.0), entry["sd"]), grid)
    if fam == "uniform":
        return GridMeasure.from_distribution(stats.uniform(entry["low"], entry["high"] - entry["low"]), grid)
    if fam == "mixture":
        comps = entry["components"]
        wts = entry.get("weights", [1.0] * len(comps))
        total = sum(wts)
        w = sum(wi / total * build_measure(c, grid, base_dir).weights for wi, c in zip(wts, comps))
        return GridMeasure.on_grid(grid, w, normalize=True)
    if fam == "file":
        P = load_measure_csv((Path(base_dir) / entry["path"]).read_text())
        if not isinstance(P, GridMeasure) or not P.same_grid(GridMeasure.uniform(grid), tol=1e-12):
            raise ConfigError(f"measure file {entry['path']} is not on the configured grid")
        return P
    raise ConfigError(f"unknown family {fam!r}")


def prior_pushforward(P0: GridMeasure, K) -> GridMeasure:
    """P0 pushed through the row-normalized kernel, so the bridge value is exactly zero."""
    import numpy as np

    Kn = K.row_normalized()
    w = P0.weights @ np.exp(Kn.log_values) * Kn.target_cell_volume
    return GridMeasure.on_grid(Kn.target, w, normalize=True)
