"""Pipeline suites, run reports and plot-data export."""
from __future__ import annotations

import csv
import io
import json
import math
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .bridge import Coupling, decomposition_check, fixed_point_hbar, sandwich_check, sinkhorn_solve
from .config import ScenarioConfig
from .duality import (DualPotential, drift_recovery, dual_ascent, hjb_residual, hopf_cole_phi, potentials_to_dual,
                      terminal_dual_value)
from .hpath import (bridge_flow, cost_flow, cost_pathwise, euler_maruyama, fokker_planck_residual, h_function,
                    hpath_drift, schrodinger_cost)
from .kernel import (CoefficientField, check_gaussian_bounds, fit_bound_constants, gaussian_kernel, kernel_from_start,
                     kernel_to_terminal, make_kernel)
from .measures import DiscreteMeasure, Grid, wasserstein2_1d
from .parallel import parallel_map
from .quantile1d import (ControlLaw1D, cost_invariance, drifted_gaussian_instance, integrability_check,
                         reconstruct_markov, simulate_reconstruction)
from .regularity_corpus import make_corpus, run_corpus

SUITE_ORDER = ("kernel", "bridge", "hpath", "duality", "quantile", "regularity")
DEPENDS = {"bridge": ("kernel",), "hpath": ("bridge",), "duality": ("bridge", "hpath")}


class StageError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


@dataclass
class Check:
    name: str
    value: float
    threshold: float
    relation: str = "<="

    @property
    def passed(self):
        if not math.isfinite(self.value):
            return False
        return self.value <= self.threshold if self.relation == "<=" else self.value >= self.threshold

    def to_dict(self):
        return {"name": self.name, "value": self.value, "threshold": self.threshold, "relation": self.relation,
                "passed": self.passed}


@dataclass
class SuiteResult:
    name: str
    checks: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)
    error: str | None = None

    @property
    def passed(self):
        return self.error is None and all(c.passed for c in self.checks)

    def check(self, name, value, threshold, relation="<="):
        self.checks.append(Check(name, float(value), float(threshold), relation))

    def to_dict(self):
        return {"passed": self.passed, "error": self.error, "metrics": self.metrics,
                "checks": [c.to_dict() for c in self.checks], "artifacts": sorted(self.artifacts)}


@dataclass
class RunReport:
    config_hash: str
    config: dict
    suites: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    series: dict = field(default_factory=dict, repr=False)

    @property
    def versions(self):
        return {"sotp": __version__, "python": platform.python_version(), "numpy": np.__version__,
                "scipy": scipy.__version__}

    @property
    def passed(self):
        return all(s.passed for s in self.suites.values())

    @property
    def failed_stage(self):
        for name in SUITE_ORDER:
            if name in self.suites and not self.suites[name].passed:
                return name
        return None

    def to_dict(self, with_timings=True):
        d = {"config_hash": self.config_hash, "passed": self.passed, "versions": self.versions,
             "config": self.config, "suites": {k: v.to_dict() for k, v in self.suites.items()}}
        if with_timings:
            d["timings"] = self.timings
        return d

    def to_json(self, with_timings=True):
        return json.dumps(self.to_dict(with_timings), indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# output helpers


class Output:
    """Writes every artifact under ``root`` with the config hash in its header."""

    def __init__(self, root, config_hash):
        self.root = Path(root)
        self.hash = config_hash
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, name):
        return self.root / name

    def csv(self, name, columns, rows, result: SuiteResult | None = None):
        buf = io.StringIO()
        buf.write(f"# config_hash={self.hash}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
        self.path(name).write_text(buf.getvalue())
        if result is not None:
            result.artifacts.append(name)
        return self.path(name)

    def json(self, name, obj, result: SuiteResult | None = None):
        self.path(name).write_text(json.dumps({"config_hash": self.hash, **obj}, indent=1, sort_keys=True))
        if result is not None:
            result.artifacts.append(name)
        return self.path(name)

    def text(self, name, text, result: SuiteResult | None = None):
        self.path(name).write_text(f"# config_hash={self.hash}\n" + text)
        if result is not None:
            result.artifacts.append(name)


# ---------------------------------------------------------------------------
# suites


class Context:
    def __init__(self, cfg: ScenarioConfig, out: Output, parallel=1):
        self.cfg = cfg
        self.out = out
        self.parallel = parallel
        self.state = {}
        self.series = {}

    @property
    def tol(self):
        return float(self.cfg["solver"]["tol"])

    @property
    def max_iter(self):
        return int(self.cfg["solver"]["max_iter"])

    def series_add(self, name, columns, rows):
        self.series[name] = (list(columns), [list(r) for r in rows])


def suite_kernel(ctx: Context, res: SuiteResult):
    cfg = ctx.cfg
    grid = cfg.grid
    coeffs = cfg.coefficients()
    kc = cfg["kernel"]
    K = make_kernel(kc["type"], coeffs, grid, grid, 0.0, 1.0, int(kc["n_steps_per_unit"]))
    if not K.is_positive:
        raise StageError("kernel", "kernel has non-positive entries")
    res.metrics["shape"] = list(K.shape)
    if kc["type"] == "pde":
        G = gaussian_kernel(coeffs.a_const, grid, grid, 0.0, 1.0, xi=coeffs.xi_const)
        core = _core_rows(K, coeffs)
        err = float(np.max(np.abs(K.values[core] - G.values[core])) / np.max(G.values[core]))
        res.check("pde_vs_gaussian_rel_error", err, 1e-3)
    c = fit_bound_constants(K)
    bc = check_gaussian_bounds(K, c)
    res.metrics.update({"C1": c.C1, "C2": c.C2})
    res.check("gaussian_bound_lower_slack", bc.worst_lower_slack, -1e-12, ">=")
    res.check("gaussian_bound_upper_slack", bc.worst_upper_slack, -1e-12, ">=")
    path = ctx.out.path("kernel.json")
    K.save(path, header_lines=(f"config_hash={ctx.out.hash}",))
    head = json.loads(path.read_text())
    head["config_hash"] = ctx.out.hash
    path.write_text(json.dumps(head, indent=1, sort_keys=True))
    res.artifacts += ["kernel.json", "kernel.csv"]
    ctx.state.update(K=K, coeffs=coeffs, grid=grid, bounds=c)


def _core_rows(K, coeffs):
    x = K.source_points
    reach = 5 * math.sqrt(coeffs.a_const * (K.t - K.s)) + abs(coeffs.xi_const) * (K.t - K.s)
    return (x - K.target.grid_min >= reach) & (K.target.grid_max - x >= reach)


def suite_bridge(ctx: Context, res: SuiteResult):
    cfg = ctx.cfg
    K, grid = ctx.state["K"], ctx.state["grid"]
    P0 = cfg.marginal("P0", grid)
    P1 = cfg.marginal("P1", grid, kernel=K)
    rep = sinkhorn_solve(K, P0, P1, tol=ctx.tol, max_iter=ctx.max_iter)
    res.metrics.update(rep.summary())
    res.check("marginal_residual", rep.marginal_residual, ctx.tol)
    rng = np.random.default_rng(int(cfg["simulation"]["seed"]))
    init = np.log(grid.h) + rng.normal(0.0, 1.0, grid.n)
    rep2 = sinkhorn_solve(K, P0, P1, tol=ctx.tol, max_iter=ctx.max_iter, init_log_nu1=init)
    res.check("uniqueness_coupling_diff", float(np.max(np.abs(rep.coupling.matrix - rep2.coupling.matrix))), 1e-8)
    fp = fixed_point_hbar(K, P0, P1, tol=ctx.tol, max_iter=ctx.max_iter)
    cfp = Coupling.from_potentials(K, fp)
    res.check("fixed_point_coupling_diff", float(np.max(np.abs(cfp.matrix - rep.coupling.matrix))), 1e-8)
    if cfg["marginals"]["P1"]["family"] == "prior_pushforward":
        res.check("prior_pushforward_VS", abs(rep.value_VS), 1e-10)
    if np.all(P1.weights > 0):
        dec = decomposition_check(P0, P1, K, report=rep)
        res.check("decomposition_residual", abs(dec.residual), 1e-8)
        sw = sandwich_check(P0, P1, K, ctx.state["bounds"], report=rep)
        res.check("sandwich_worst_gap", sw.worst_gap, -1e-10, ">=")
        res.metrics["sandwich_terms"] = list(sw.terms)
    x = grid.centers
    rows = [(i, x[i], P0.weights[i], P1.weights[i], rep.potentials.log_nu0[i], rep.potentials.log_nu1[i])
            for i in range(grid.n)]
    ctx.out.csv("bridge_potentials.csv", ["index", "x", "P0", "P1", "log_nu0", "log_nu1"], rows, res)
    ctx.out.csv("sinkhorn_residuals.csv", ["iteration", "residual"],
                [(k + 1, r) for k, r in enumerate(rep.residual_history)], res)
    ctx.series_add("bridge_marginals", ["x", "P0_density", "P1_density"],
                   [(x[i], P0.density[i], P1.density[i]) for i in range(grid.n)])
    ctx.series_add("sinkhorn_residuals", ["iteration", "residual"],
                   [(k + 1, r) for k, r in enumerate(rep.residual_history)])
    ctx.state.update(P0=P0, P1=P1, bridge=rep)


def suite_hpath(ctx: Context, res: SuiteResult):
    cfg = ctx.cfg
    K, grid, coeffs, rep = ctx.state["K"], ctx.state["grid"], ctx.state["coeffs"], ctx.state["bridge"]
    kc = cfg["kernel"]
    tg = np.linspace(0.0, 1.0, int(cfg["time"]["n"]))
    nspu = int(kc["n_steps_per_unit"])
    kt = kernel_to_terminal(kc["type"], coeffs, grid, tg, nspu)
    kf = kernel_from_start(kc["type"], coeffs, grid, tg, n_steps_per_unit=nspu)
    h = h_function(kt, rep.potentials)
    drift = hpath_drift(h, coeffs)
    flow = bridge_flow(rep.potentials, kf, h)
    fp = fokker_planck_residual(flow, coeffs, drift)
    res.check("fokker_planck_residual", fp, 1e-3)
    L = schrodinger_cost(coeffs)
    cf = cost_flow(flow, drift, L)
    res.metrics.update({"cost_flow": cf, "VS": rep.value_VS})
    sim = cfg["simulation"]
    N, dt = int(sim["N"]), float(sim["dt"])
    stride = int(round((tg[1] - tg[0]) / dt))
    ens = euler_maruyama(drift, coeffs, ctx.state["P0"], N, dt, int(sim["seed"]), record_stride=stride, cost=L,
                         block_size=int(sim["block_size"]), within_cell=True)
    w2 = wasserstein2_1d(DiscreteMeasure(ens.paths[:, -1]), ctx.state["P1"])
    cost = cost_pathwise(ens)
    res.check("terminal_W2", w2, 0.05)
    res.check("pathwise_cost_gap", abs(cost - rep.value_VS), 5 / math.sqrt(N) + 0.01)
    res.metrics.update({"pathwise_cost": cost, "exit_fraction": ens.exit_fraction})
    x = grid.centers
    dens = flow.densities
    rows = [(tg[k], x[i], dens[k, i], drift.values[k, i]) for k in range(len(tg)) for i in range(grid.n)]
    ctx.out.csv("bridge_flow.csv", ["t", "x", "density", "drift"], rows, res)
    w2t = [(ens.times[k], wasserstein2_1d(DiscreteMeasure(ens.paths[:, k]), flow.measure(k)))
           for k in range(len(ens.times))]
    ctx.out.csv("ensemble_w2.csv", ["t", "W2_to_flow"], w2t, res)
    ctx.series_add("flow_densities", ["t", "x", "density"], [(r[0], r[1], r[2]) for r in rows])
    ctx.series_add("ensemble_w2", ["t", "W2_to_flow"], w2t)
    hist, edges = np.histogram(ens.paths[:, -1], bins=grid.edges)
    ctx.series_add("terminal_histogram", ["x", "empirical_density", "P1_density"],
                   [(x[i], hist[i] / (N * grid.h), ctx.state["P1"].density[i]) for i in range(grid.n)])
    ctx.state.update(time_grid=tg, kt=kt, h=h, drift=drift, flow=flow)


def suite_duality(ctx: Context, res: SuiteResult):
    cfg = ctx.cfg
    K, grid, coeffs, rep = ctx.state["K"], ctx.state["grid"], ctx.state["coeffs"], ctx.state["bridge"]
    P0, P1 = ctx.state["P0"], ctx.state["P1"]
    hist = []
    f, dual = dual_ascent(K, P0, P1, tol=ctx.tol, max_iter=ctx.max_iter, history=hist)
    res.check("duality_gap", abs(rep.value_VS - dual), 1e-6)
    rng = np.random.default_rng(int(cfg["simulation"]["seed"]) + 1)
    worst = -math.inf
    for _ in range(int(cfg["duality"]["n_random_f"])):
        fr = DualPotential(rng.uniform(-3, 3) * np.sin(rng.uniform(0.2, 2) * grid.centers + rng.uniform(0, 6))
                           + rng.normal(0, 0.5, grid.n), grid)
        worst = max(worst, terminal_dual_value(K, fr, P0, P1) - rep.value_VS)
    res.check("weak_duality_excess", worst, 1e-8)
    fstar = potentials_to_dual(rep.potentials, grid)
    phi = hopf_cole_phi(ctx.state["kt"], fstar)
    res.check("phi_vs_log_h", float(np.max(np.abs(phi.values - ctx.state["h"].log_values))), 1e-8)
    b_dual = drift_recovery(phi, coeffs)
    res.check("drift_consistency", float(np.max(np.abs(b_dual.values - ctx.state["drift"].values))), 1e-8)
    smooth = DualPotential(np.cos(grid.centers), grid)
    res.metrics["hjb_residual_smooth_payoff"] = hjb_residual(hopf_cole_phi(ctx.state["kt"], smooth), coeffs,
                                                             margin=float(cfg["duality"]["hjb_margin"]))
    gaps = [(k + 1, rep.value_VS - v) for k, v in enumerate(hist)]
    ctx.out.csv("dual_gap.csv", ["iteration", "gap"], gaps, res)
    ctx.series_add("dual_gap", ["iteration", "gap"], gaps)


def _quantile_instance(args):
    seed, qc = args
    rng = np.random.default_rng(seed)
    g = qc["grid"]
    grid = Grid.from_bounds(float(g["min"]), float(g["max"]), int(g["n"]))
    tg = np.linspace(0.0, 1.0, int(qc["n_times"]))
    m = int(rng.integers(2, 5))
    sigma = float(rng.uniform(0.4, 0.9))
    joint = drifted_gaussian_instance(grid, tg, float(rng.uniform(-0.5, 0.5)), float(rng.uniform(0.4, 0.8)),
                                      np.sort(rng.uniform(-1.5, 2.0, m)), rng.dirichlet(np.ones(m)), sigma)
    base = CoefficientField.constant(sigma * sigma)
    coeffs = reconstruct_markov(joint, base)
    out = {"seed": seed, "min_a_tilde": float(coeffs.a_tilde.min())}
    integ = integrability_check(coeffs, joint)
    out["integrability_gap"] = abs(integ.identity_gap)
    J, I = cost_invariance(joint, coeffs, lambda t, x: x * x, lambda t, u: u * u / 2)
    Jc, Ic = cost_invariance(joint, coeffs, None, lambda t, u: np.sqrt(np.abs(u)))
    out["cost_gap"] = max(abs(J - I), abs(Jc - Ic))
    again = reconstruct_markov(ControlLaw1D.from_reconstruction(joint, coeffs), coeffs)
    out["idempotence"] = float(max(np.max(np.abs(again.b_tilde - coeffs.b_tilde)),
                                   np.max(np.abs(again.diffusion_edges - coeffs.diffusion_edges))))
    if qc.get("simulate"):
        sim = simulate_reconstruction(joint, coeffs, int(qc["N"]), float(qc["dt"]), seed, C=float(qc["C"]))
        out["sim_excess"] = float(np.max(sim.w2 - sim.budget))
    if seed == qc.get("_first_seed"):
        out["coeffs"] = {"x": grid.centers.tolist(), "b_tilde": coeffs.b_tilde[-1].tolist(),
                         "b": joint.slices[-1].cond_mean.tolist(), "edges": grid.edges[1:-1].tolist(),
                         "a_tilde": coeffs.a_tilde[-1].tolist()}
    return out


def suite_quantile(ctx: Context, res: SuiteResult):
    qc = dict(ctx.cfg["quantile"])
    seed0 = int(ctx.cfg["simulation"]["seed"]) * 1000 + 17
    seeds = [seed0 + k for k in range(int(qc["n_instances"]))]
    qc["_first_seed"] = seeds[0]
    outs = parallel_map(_quantile_instance, [(s, qc) for s in seeds], ctx.parallel)
    res.check("min_a_tilde", min(o["min_a_tilde"] for o in outs), -1e-12, ">=")
    res.check("integrability_identity", max(o["integrability_gap"] for o in outs), 1e-8)
    res.check("cost_invariance", max(o["cost_gap"] for o in outs), 1e-8)
    res.check("idempotence", max(o["idempotence"] for o in outs), 1e-12)
    if qc.get("simulate"):
        res.check("simulation_W2_excess", max(o["sim_excess"] for o in outs), 0.0)
    c = outs[0]["coeffs"]
    rows = list(zip(c["x"], c["b"], c["b_tilde"]))
    ctx.out.csv("quantile_drift.csv", ["x", "b", "b_tilde"], rows, res)
    ctx.out.csv("quantile_diffusion.csv", ["edge", "a_tilde"], list(zip(c["edges"], c["a_tilde"])), res)
    ctx.series_add("quantile_drift", ["x", "b", "b_tilde"], rows)
    ctx.series_add("quantile_diffusion", ["edge", "a_tilde"], list(zip(c["edges"], c["a_tilde"])))


def suite_regularity(ctx: Context, res: SuiteResult):
    rc = ctx.cfg["regularity"]
    corpus = make_corpus(int(rc["n_instances"]), int(ctx.cfg["simulation"]["seed"]), float(rc["box"]),
                         float(rc["bin_width"]), int(rc["n_omega"]))
    reports = run_corpus(corpus, rc["suites"], parallel=ctx.parallel)
    for suite in rc["suites"]:
        sel = [r for r in reports if r["suite"] == suite]
        if sel:
            res.check(f"{suite}_worst_excess", max(-(r["slack"] + 1e-6 + r["budget"]) for r in sel), 0.0)
    cols = ["instance", "suite", "name", "lhs", "rhs", "slack", "budget"]
    rows = [[r[c] for c in cols] for r in reports]
    ctx.out.csv("regularity_results.csv", cols, rows, res)
    ctx.series_add("regularity_slacks", ["suite", "slack"], [(r["suite"], r["slack"]) for r in reports])


SUITE_FUNCS = {"kernel": suite_kernel, "bridge": suite_bridge, "hpath": suite_hpath, "duality": suite_duality,
               "quantile": suite_quantile, "regularity": suite_regularity}


def run(cfg: ScenarioConfig, out_dir, parallel=1, plots=None) -> RunReport:
    """Run the selected suites in dependency order under ``out_dir/<config hash>``."""
    root = Path(out_dir) / cfg.hash
    out = Output(root, cfg.hash)
    ctx = Context(cfg, out, parallel)
    report = RunReport(cfg.hash, cfg.data)
    selected = set(cfg["suites"]["run"])
    for name in reversed(SUITE_ORDER):
        if name in selected:
            selected |= set(DEPENDS.get(name, ()))
    for name in SUITE_ORDER:
        if name not in selected:
            continue
        res = SuiteResult(name)
        report.suites[name] = res
        t0 = time.perf_counter()
        try:
            if any(not report.suites[d].passed for d in DEPENDS.get(name, ()) if d in report.suites):
                raise StageError(name, "an upstream stage failed")
            SUITE_FUNCS[name](ctx, res)
        except Exception as exc:  # noqa: BLE001 - every module error is reported with its stage
            res.error = f"{type(exc).__name__}: {exc}"
        report.timings[name] = time.perf_counter() - t0
    report.series = ctx.series
    out.path("report.json").write_text(report.to_json(with_timings=False))
    out.json("timings.json", {"timings": report.timings})
    out.path("config.json").write_text(cfg.to_json())
    do_plots = cfg["plots"]["enabled"] if plots is None else plots
    if do_plots:
        emit_plot_data(report, sorted(report.series), root / "plot_data")
        from .plotting import render_all

        render_all(root / "plot_data", root / "figures", cfg.hash)
    return report


def emit_plot_data(report: RunReport, what, out_dir):
    """Write the named series as plain CSV files; an empty selection writes nothing."""
    what = list(what)
    missing = [w for w in what if w not in report.series]
    if missing:
        raise KeyError(f"report has no series {missing}")
    if not what:
        return []
    out = Output(out_dir, report.config_hash)
    paths = []
    for name in what:
        cols, rows = report.series[name]
        paths.append(out.csv(f"{name}.csv", cols, rows))
    return paths
