"""Static figures: sensitivity error bars, benchmark bars, study bias boxplots.

Figures are built with the object-oriented API and written straight to file,
so no interactive backend is ever touched.  SVG output carries no date and a
fixed id salt, which keeps reruns byte-identical.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib
import numpy as np
from matplotlib.figure import Figure

_RC = {"svg.hashsalt": "tcace", "font.size": 9}


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    meta = {"Date": None} if path.suffix.lower() == ".svg" else None
    with matplotlib.rc_context(_RC):
        fig.savefig(path, metadata=meta, bbox_inches="tight")
    return path


def plot_sensitivity(per_gamma: list[dict], path, point_estimate: float | None = None) -> Path:
    """Estimated T-CACE range against gamma: solid bars for the point interval, dashed for bootstrap."""
    with matplotlib.rc_context(_RC):
        fig = Figure(figsize=(6.0, 3.6))
        ax = fig.add_subplot()
        gs = np.array([e["gamma"] for e in per_gamma])
        defined = [e for e in per_gamma if e.get("interval")]
        if defined:
            g = np.array([e["gamma"] for e in defined])
            lo = np.array([e["interval"][0] for e in defined])
            hi = np.array([e["interval"][1] for e in defined])
            mid = 0.5 * (lo + hi)
            ax.errorbar(g, mid, yerr=[mid - lo, hi - mid], fmt="none", ecolor="black", capsize=3,
                        label="partial identification interval")
        boot = [e for e in per_gamma if e.get("bootstrap_ci")]
        if boot:
            g = np.array([e["gamma"] for e in boot])
            blo = np.array([e["bootstrap_ci"][0] for e in boot])
            bhi = np.array([e["bootstrap_ci"][1] for e in boot])
            bmid = 0.5 * (blo + bhi)
            bars = ax.errorbar(g, bmid, yerr=[bmid - blo, bhi - bmid], fmt="none", ecolor="tab:blue",
                               capsize=2, label="bootstrap interval")
            bars[-1][0].set_linestyle("--")
        if point_estimate is not None:
            ax.axhline(point_estimate, color="tab:red", lw=0.8, label="point estimate")
        ax.axhline(0.0, color="grey", lw=0.6, ls=":")
        ax.set_xlabel("sensitivity parameter gamma")
        ax.set_ylabel("T-CACE")
        if gs.size:
            pad = 0.02 * max(gs.max() - gs.min(), 0.1)
            ax.set_xlim(gs.min() - pad, gs.max() + pad)
        ax.legend(loc="best", frameon=False)
        return _save(fig, path)


def plot_benchmarks(rows: list[dict], path) -> Path:
    """Horizontal bars of gamma-hat per omitted covariate, ascending."""
    rows = [r for r in rows if r.get("gamma_hat") is not None]
    with matplotlib.rc_context(_RC):
        fig = Figure(figsize=(5.0, 0.4 * max(len(rows), 2) + 0.8))
        ax = fig.add_subplot()
        names = [r["omitted_covariate"] for r in rows]
        vals = [r["gamma_hat"] for r in rows]
        ax.barh(range(len(rows)), vals, color="tab:gray")
        ax.set_yticks(range(len(rows)), names)
        ax.axvline(1.0, color="black", lw=0.6)
        ax.set_xlabel("Gamma-hat")
        if vals:
            ax.set_xlim(min(0.95, min(vals) - 0.02), max(vals) * 1.05)
        return _save(fig, path)


def plot_study_bias(table, path) -> Path:
    """Boxplots of per-trial bias for every estimator of a study."""
    with matplotlib.rc_context(_RC):
        fig = Figure(figsize=(6.0, 3.6))
        ax = fig.add_subplot()
        names = list(table.biases)
        ax.boxplot([table.biases[n] for n in names], showfliers=True)
        ax.set_xticks(range(1, len(names) + 1), names)
        ax.axhline(0.0, color="grey", lw=0.6, ls=":")
        ax.set_ylabel("estimate - oracle")
        ax.set_title(f"n + N = {table.spec.n_total}, ratio {table.rows[0].ratio:.2f}")
        return _save(fig, path)


def plot_sensitivity_study(study, path) -> Path:
    """Mean interval ends over trials against gamma, with the mean oracle as a line."""
    per = [{"gamma": g, "interval": [lo, hi]} for g, lo, hi in zip(study.gammas, study.mean_lo, study.mean_hi)
           if np.isfinite(lo) and np.isfinite(hi)]
    return plot_sensitivity(per, path, point_estimate=float(np.mean(study.truths)))
