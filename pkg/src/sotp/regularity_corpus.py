"""Random regularity corpora (JSON round-trip) and a suite runner over them."""
from __future__ import annotations

import json

import numpy as np
from scipy import stats

from .bridge import sandwich_check, sinkhorn_solve
from .kernel import fit_bound_constants
from .measures import Grid, GridMeasure
from .parallel import parallel_map
from .regularity import (GaussianFamily, RandomVariableModel, RegularityReport, constant_sequence, continuity_probe,
                         displacement_convexity_probe, displacement_interpolation, gaussian_lipschitz_constant,
                         lipschitz_check, mollified_sequence, psi_functional, semiconcavity_check, shifted_sequence)


def _gauss_params(rng, mean_scale=1.0, sd_range=(0.4, 1.1)):
    return {"mean": float(rng.normal(0, mean_scale)), "sd": float(rng.uniform(*sd_range))}


def make_corpus(n_instances, seed, box=6.0, bin_width=0.02, n_omega=64, a=1.0):
    """Reproducible instances: a sample space with two variables, two source laws and a target."""
    rng = np.random.default_rng([int(seed), 4242])
    inst = []
    for k in range(int(n_instances)):
        w = rng.dirichlet(np.ones(n_omega))
        inst.append({
            "id": k,
            "omega_weights": w.tolist(),
            "X1": np.clip(rng.normal(rng.normal(0, 0.5), rng.uniform(0.3, 1.2), n_omega), -3, 3).tolist(),
            "X2": np.clip(rng.normal(rng.normal(0, 0.5), rng.uniform(0.3, 1.2), n_omega), -3, 3).tolist(),
            "P0": _gauss_params(rng),
            "P1": _gauss_params(rng),
            "Q": _gauss_params(rng, 0.5, (0.5, 1.2)),
        })
    return {"grid": {"min": -box, "max": box, "n": int(round(2 * box / bin_width))}, "a": a, "C": 1.0 / (2 * a),
            "seed": int(seed), "instances": inst}


def save_corpus(corpus, path):
    with open(path, "w") as fh:
        json.dump(corpus, fh, indent=1)


def load_corpus(path):
    with open(path) as fh:
        return json.load(fh)


def _measure(entry, grid):
    return GridMeasure.from_distribution(stats.norm(entry["mean"], entry["sd"]), grid)


def _rows(inst_id, suite, reports):
    return [{"instance": inst_id, "suite": suite, "name": r.name, "lhs": r.lhs, "rhs": r.rhs, "slack": r.slack,
             "budget": r.budget} for r in reports]


def run_instance(args):
    corpus_meta, inst, suites = args
    g = corpus_meta["grid"]
    grid = Grid.from_bounds(float(g["min"]), float(g["max"]), int(g["n"]))
    a, C = float(corpus_meta["a"]), float(corpus_meta["C"])
    fam = GaussianFamily(a, grid)
    P0, P1, Q = _measure(inst["P0"], grid), _measure(inst["P1"], grid), _measure(inst["Q"], grid)
    out = []
    if "semiconcavity" in suites:
        model = RandomVariableModel(np.asarray(inst["omega_weights"]), {"X1": inst["X1"], "X2": inst["X2"]})
        reps = semiconcavity_check(model, (0.0, 0.25, 0.5, 0.75, 1.0), Q, fam, C, bin_grid=grid)
        out += _rows(inst["id"], "semiconcavity", reps)
    if "lipschitz" in suites or "sandwich" in suites:
        K = fam.kernel(grid.centers)
        consts = fit_bound_constants(K)
    if "lipschitz" in suites:
        out += _rows(inst["id"], "lipschitz", lipschitz_check(P0, P1, Q, fam, consts, C))
        A0 = P0.as_atoms()
        seqs = {"constant": constant_sequence(P0, 3), "shifted": shifted_sequence(A0, (2, 4, 8)),
                "mollified": mollified_sequence(P0, (2, 4, 8))}
        for name, seq in seqs.items():
            lim = A0 if name == "shifted" else P0
            reps = continuity_probe(seq, lim, Q, fam, constants=consts, C=C)
            out += _rows(inst["id"], f"continuity_{name}", reps)
    if "displacement" in suites:
        out += _rows(inst["id"], "displacement", displacement_convexity_probe(P0, P1, Q, fam, C, binned=True))
    if "sandwich" in suites:
        rep = sinkhorn_solve(K, P0, Q, tol=1e-11)
        sw = sandwich_check(P0, Q, K, consts, report=rep)
        reps = [RegularityReport.make(f"sandwich_{i}", sw.terms[i], sw.terms[i + 1], budget=1e-10)
                for i in range(4)]
        out += _rows(inst["id"], "sandwich", reps)
    if "psi" in suites:
        lip = gaussian_lipschitz_constant(a, P0, P1, Q)
        vals = [psi_functional(displacement_interpolation(P0, P1, t), Q, fam, C).value for t in (0.0, 0.5, 1.0)]
        reps = [RegularityReport.make("psi_midpoint_convexity", vals[1], 0.5 * (vals[0] + vals[2]),
                                      budget=lip * grid.h)]
        out += _rows(inst["id"], "psi", reps)
    # continuity rows are reported under the lipschitz suite selection
    for r in out:
        if r["suite"].startswith("continuity_"):
            r["name"] = r["suite"]
            r["suite"] = "lipschitz"
    return out


def run_corpus(corpus, suites, parallel=1):
    meta = {k: v for k, v in corpus.items() if k != "instances"}
    results = parallel_map(run_instance, [(meta, inst, tuple(suites)) for inst in corpus["instances"]], parallel)
    return [r for rows in results for r in rows]
