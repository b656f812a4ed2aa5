"""Command-line entry point: ``sotp <group> <action>`` plus ``sotp run``."""
from __future__ import annotations

import argparse
import hashlib
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from .config import REGULARITY_SUITES, ConfigError, ScenarioConfig
from .kernel import CoefficientField
from .measures import Grid
from .quantile1d import ControlLaw1D, ReconstructionError, integrability_check, reconstruct_markov
from .regularity_corpus import load_corpus, make_corpus, run_corpus, save_corpus
from .runner import Output, run

STAGE_SUITES = {
    ("kernel", "build"): ["kernel"],
    ("bridge", "solve"): ["bridge"],
    ("duality", "gap"): ["duality"],
    ("duality", "hjb-check"): ["duality"],
    ("hpath", "simulate"): ["hpath"],
}


def _global_args(p):
    p.add_argument("--config", help="scenario file (.toml or .json)")
    p.add_argument("--out-dir", default="runs", help="root for content-addressed run directories")
    p.add_argument("--seed", type=int, help="override simulation.seed")
    p.add_argument("--parallel", type=int, default=1, help="worker processes for independent instances")


def build_parser():
    p = argparse.ArgumentParser(prog="sotp", description="Schrodinger-bridge and stochastic transport toolkit")
    _global_args(p)
    sub = p.add_subparsers(dest="group", required=True)

    k = sub.add_parser("kernel").add_subparsers(dest="action", required=True)
    kb = k.add_parser("build", help="build the transition kernel K(0 -> 1)")
    kb.add_argument("--out", help="also copy kernel.json/.csv to this path")

    b = sub.add_parser("bridge").add_subparsers(dest="action", required=True)
    b.add_parser("solve", help="solve the Schrodinger system and check it")

    d = sub.add_parser("duality").add_subparsers(dest="action", required=True)
    d.add_parser("gap", help="primal-dual gap, weak duality and drift consistency")
    d.add_parser("hjb-check", help="HJB residual of the Hopf-Cole value function")

    h = sub.add_parser("hpath").add_subparsers(dest="action", required=True)
    hs = h.add_parser("simulate", help="simulate the h-path process and compare with the bridge")
    hs.add_argument("--N", type=int)
    hs.add_argument("--dt", type=float)

    q = sub.add_parser("quantile").add_subparsers(dest="action", required=True)
    qr = q.add_parser("reconstruct", help="Markov reconstruction from joint (t_index, y, u, weight) samples")
    qr.add_argument("--joint", required=True)
    qr.add_argument("--sigma-floor", type=float, required=True, help="constant base diffusion sigma (a = sigma^2)")
    qr.add_argument("--out", required=True)
    qr.add_argument("--t-max", type=float, default=1.0)
    qr.add_argument("--cells", type=int, default=30)

    r = sub.add_parser("regularity").add_subparsers(dest="action", required=True)
    rc = r.add_parser("check", help="run one regularity suite over a corpus")
    rc.add_argument("--suite", choices=REGULARITY_SUITES, required=True)
    rc.add_argument("--corpus", required=True)
    rc.add_argument("--out", required=True)
    rm = r.add_parser("make-corpus", help="write a reproducible random corpus")
    rm.add_argument("--n", type=int, default=10)
    rm.add_argument("--bin-width", type=float, default=0.02)
    rm.add_argument("--out", required=True)

    rn = sub.add_parser("run", help="run the configured suites in dependency order")
    rn.add_argument("--no-plots", action="store_true")
    return p


def _load_config(args, suites=None, extra=None):
    over = {}
    if args.seed is not None:
        over["simulation"] = {"seed": args.seed}
    if suites is not None:
        over["suites"] = {"run": suites}
    if extra:
        for k, v in extra.items():
            over.setdefault(k, {}).update(v)
    return ScenarioConfig.load(args.config, overrides=over)


def _print_report(report, keys=None):
    for name, res in report.suites.items():
        status = "PASS" if res.passed else "FAIL"
        print(f"[{status}] {name}")
        if res.error:
            print(f"    error: {res.error}")
        for c in res.checks:
            print(f"    {'ok ' if c.passed else 'BAD'} {c.name} = {c.value:.6g} ({c.relation} {c.threshold:g})")
        for k, v in res.metrics.items():
            if keys is None or k in keys:
                print(f"    {k} = {v}")


def _finish(report, out_dir):
    print(f"run directory: {Path(out_dir) / report.config_hash}")
    if report.passed:
        return 0
    print(f"failed stage: {report.failed_stage}", file=sys.stderr)
    return 1


def cmd_stage(args):
    extra = None
    if args.group == "hpath":
        sim = {k: v for k, v in (("N", args.N), ("dt", args.dt)) if v is not None}
        extra = {"simulation": sim} if sim else None
    cfg = _load_config(args, STAGE_SUITES[(args.group, args.action)], extra)
    report = run(cfg, args.out_dir, parallel=args.parallel, plots=False)
    keys = {"hjb-check": {"hjb_residual_smooth_payoff"}}.get(args.action)
    _print_report(report, keys)
    if args.group == "kernel" and args.out and "kernel" in report.suites and report.suites["kernel"].passed:
        src = Path(args.out_dir) / report.config_hash
        dst = Path(args.out)
        shutil.copyfile(src / "kernel.json", dst)
        shutil.copyfile(src / "kernel.csv", dst.with_suffix(".csv"))
    return _finish(report, args.out_dir)


def cmd_run(args):
    cfg = _load_config(args)
    report = run(cfg, args.out_dir, parallel=args.parallel, plots=False if args.no_plots else None)
    _print_report(report)
    return _finish(report, args.out_dir)


def read_joint_csv(path):
    rows = [ln for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    head = [h.strip() for h in rows[0].split(",")]
    need = ["t_index", "y", "u", "weight"]
    if any(c not in head for c in need):
        raise ValueError(f"joint CSV needs columns {need}, got {head}")
    data = np.array([[float(v) for v in r.split(",")] for r in rows[1:]])
    cols = {c: data[:, head.index(c)] for c in need}
    return cols["t_index"].astype(int), cols["y"], cols["u"], cols["weight"]


def cmd_quantile(args):
    text = Path(args.joint).read_bytes()
    digest = hashlib.sha256(text + json.dumps(vars(args), sort_keys=True, default=str).encode()).hexdigest()[:16]
    t_idx, y, u, w = read_joint_csv(args.joint)
    n_t = int(t_idx.max()) + 1
    span = y.max() - y.min()
    pad = 0.05 * span + 1e-9
    grid = Grid.from_bounds(float(y.min() - pad), float(y.max() + pad), args.cells)
    tg = np.linspace(0.0, args.t_max, n_t)
    joint = ControlLaw1D.from_joint(tg, grid, t_idx, y, u, w)
    base = CoefficientField.constant(args.sigma_floor ** 2)
    try:
        coeffs = reconstruct_markov(joint, base, sigma_floor=args.sigma_floor)
    except ReconstructionError as exc:
        print(f"reconstruction failed: {exc}", file=sys.stderr)
        return 1
    integ = integrability_check(coeffs, joint)
    doc = {"config_hash": digest, "time_grid": tg.tolist(), "grid": grid.to_dict(),
           "b_tilde": coeffs.b_tilde.tolist(), "a_tilde_edges": coeffs.a_tilde.tolist(),
           "sigma2_edges": coeffs.sigma2_edges.tolist(), "sigma_floor": coeffs.sigma_floor,
           "integrability": {"drift_abs": integ.drift_abs, "diffusion_weighted": integ.diffusion_weighted,
                             "control_abs": integ.control_abs}}
    Path(args.out).write_text(json.dumps(doc, indent=1, sort_keys=True))
    print(f"wrote {args.out}: {n_t} slices, min a_tilde {coeffs.a_tilde.min():.3e}, "
          f"int|b~| - int E|u| = {integ.identity_gap:.3e}")
    return 0


def cmd_regularity(args):
    if args.action == "make-corpus":
        seed = 0 if args.seed is None else args.seed
        save_corpus(make_corpus(args.n, seed, bin_width=args.bin_width), args.out)
        print(f"wrote {args.out}")
        return 0
    corpus = load_corpus(args.corpus)
    digest = hashlib.sha256((json.dumps(corpus, sort_keys=True) + args.suite).encode()).hexdigest()[:16]
    rows = run_corpus(corpus, [args.suite], parallel=args.parallel)
    cols = ["instance", "suite", "name", "lhs", "rhs", "slack", "budget"]
    out = Output(Path(args.out).parent, digest)
    out.csv(Path(args.out).name, cols, [[r[c] for c in cols] for r in rows])
    bad = [r for r in rows if r["slack"] < -(1e-6 + r["budget"])]
    print(f"{len(rows)} checks, {len(bad)} violations; wrote {args.out}")
    return 1 if bad else 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.group == "run":
            return cmd_run(args)
        if args.group == "quantile":
            return cmd_quantile(args)
        if args.group == "regularity":
            return cmd_regularity(args)
        return cmd_stage(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
