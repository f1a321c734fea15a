"""Figures from an experiment CSV. Reads only the CSV, never a live simulation."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from sigbench.bench import read_csv  # noqa: E402

PANELS = {
    "throughput": ("tps", "throughput (tx/s)"),
    "latency": ("lat_p50_ms", "median latency (ms)"),
    "viewchanges": ("viewchanges", "view changes"),
    "leader_busy": ("leader_busy_frac", "leader CPU busy fraction"),
}


def _series(rows, metric):
    """``{(scheme, rate): (n, mean, std)}`` arrays, sorted by n."""
    means = {(r["scheme"], r["rate"], int(r["n"])): float(r[metric]) for r in rows if r["rep"] == "mean"}
    stds = {(r["scheme"], r["rate"], int(r["n"])): float(r[metric]) for r in rows if r["rep"] == "std"}
    if not means:
        # Single-repetition files written by hand may lack aggregate rows.
        means = {(r["scheme"], r["rate"], int(r["n"])): float(r[metric]) for r in rows}
    grouped = defaultdict(list)
    for (scheme, rate, n), value in means.items():
        grouped[scheme, rate].append((n, value, stds.get((scheme, rate, n), 0.0)))
    return {key: np.array(sorted(points)).T for key, points in sorted(grouped.items())}


def plot_metric(rows, metric: str, ylabel: str, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    series = _series(rows, metric)
    multi_rate = len({rate for _, rate in series}) > 1
    for (scheme, rate), (ns, mean, std) in series.items():
        label = f"{scheme} @ {float(rate):g} tx/s" if multi_rate else scheme
        ax.errorbar(ns, mean, yerr=np.nan_to_num(std), marker="o", capsize=3, label=label)
    ax.set_xlabel("committee size n")
    ax.set_ylabel(ylabel)
    ax.set_ylim(bottom=0)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_ratio(rows, path: Path) -> Path | None:
    """BLS over EdDSA throughput at each n, one line per offered rate."""
    series = _series(rows, "tps")
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    drawn = False
    for rate in sorted({rate for _, rate in series}, key=float):
        if ("bls", rate) not in series or ("eddsa", rate) not in series:
            continue
        bn, bt, _ = series["bls", rate]
        en, et, _ = series["eddsa", rate]
        common, bi, ei = np.intersect1d(bn, en, return_indices=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            ax.plot(common, bt[bi] / et[ei], marker="o", label=f"{float(rate):g} tx/s")
        drawn = True
    if not drawn:
        plt.close(fig)
        return None
    ax.axhline(1.0, color="grey", lw=0.8)
    ax.set_xlabel("committee size n")
    ax.set_ylabel("throughput ratio BLS / EdDSA")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_figures(csv_path: str | Path, out_dir: str | Path) -> list[Path]:
    """Write one PNG per panel next to each other in ``out_dir``."""
    rows = read_csv(csv_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [plot_metric(rows, m, label, out / f"{name}.png") for name, (m, label) in PANELS.items()]
    ratio = plot_ratio(rows, out / "throughput_ratio.png")
    return paths + ([ratio] if ratio else [])
