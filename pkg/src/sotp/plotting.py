"""PNG figures rendered from the plot-data CSV series (Agg backend, files only)."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {"figure.figsize": (5.5, 3.6), "axes.grid": True, "grid.alpha": 0.3, "font.size": 9, "savefig.dpi": 120}


def read_series(path):
    """(columns, rows) of a plot-data CSV; numeric fields become floats."""
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rd = csv.reader(lines)
    cols = next(rd)
    rows = []
    for r in rd:
        out = []
        for v in r:
            try:
                out.append(float(v))
            except ValueError:
                out.append(v)
        rows.append(out)
    return cols, rows


def _save(fig, path, config_hash):
    fig.tight_layout()
    fig.savefig(path, metadata={"Description": f"config_hash={config_hash}"})
    plt.close(fig)
    return path


def plot_bridge_marginals(cols, rows, ax):
    a = np.array(rows, dtype=float)
    ax.plot(a[:, 0], a[:, 1], label="P0")
    ax.plot(a[:, 0], a[:, 2], label="P1")
    ax.set_xlabel("x")
    ax.set_ylabel("density")
    ax.legend()


def plot_flow_densities(cols, rows, ax):
    a = np.array(rows, dtype=float)
    times = np.unique(a[:, 0])
    pick = times[np.linspace(0, times.size - 1, min(6, times.size)).astype(int)]
    cmap = plt.get_cmap("viridis")
    for k, t in enumerate(pick):
        sel = a[:, 0] == t
        ax.plot(a[sel, 1], a[sel, 2], color=cmap(k / max(len(pick) - 1, 1)), label=f"t={t:.2f}")
    ax.set_xlabel("x")
    ax.set_ylabel("density")
    ax.legend(fontsize=7)


def _semilog(xlabel, ylabel):
    def plot(cols, rows, ax):
        a = np.array(rows, dtype=float)
        y = np.abs(a[:, 1])
        ax.semilogy(a[:, 0], np.where(y > 0, y, np.nan), marker=".")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
    return plot


def plot_xy(xlabel, ylabel):
    def plot(cols, rows, ax):
        a = np.array(rows, dtype=float)
        for j in range(1, a.shape[1]):
            ax.plot(a[:, 0], a[:, j], label=cols[j])
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if a.shape[1] > 2:
            ax.legend()
    return plot


def plot_slack_histogram(cols, rows, ax):
    suites = sorted({r[0] for r in rows})
    for s in suites:
        v = np.array([r[1] for r in rows if r[0] == s], dtype=float)
        ax.hist(v, bins=20, alpha=0.6, label=s)
    ax.set_xlabel("slack")
    ax.set_ylabel("count")
    ax.legend(fontsize=7)


PLOTTERS = {
    "bridge_marginals": plot_bridge_marginals,
    "sinkhorn_residuals": _semilog("iteration", "marginal residual"),
    "flow_densities": plot_flow_densities,
    "ensemble_w2": plot_xy("t", "W2(empirical, flow)"),
    "terminal_histogram": plot_xy("x", "density"),
    "dual_gap": _semilog("iteration", "primal - dual"),
    "quantile_drift": plot_xy("x", "drift"),
    "quantile_diffusion": plot_xy("x", "diffusion correction"),
    "regularity_slacks": plot_slack_histogram,
}


def render_all(data_dir, fig_dir, config_hash=""):
    """One PNG per recognized CSV series in ``data_dir``."""
    data_dir, fig_dir = Path(data_dir), Path(fig_dir)
    if not data_dir.exists():
        return []
    fig_dir.mkdir(parents=True, exist_ok=True)
    out = []
    with plt.rc_context(STYLE):
        for path in sorted(data_dir.glob("*.csv")):
            plotter = PLOTTERS.get(path.stem)
            if plotter is None:
                continue
            cols, rows = read_series(path)
            if not rows:
                continue
            fig, ax = plt.subplots()
            plotter(cols, rows, ax)
            ax.set_title(path.stem.replace("_", " "))
            out.append(_save(fig, fig_dir / f"{path.stem}.png", config_hash))
    return out
