"""Training curves and performance-profile figures from metric logs."""
from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from typing import Dict, Iterable, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import EmptyLog  # noqa: E402
from .evaluation import performance_profile  # noqa: E402
from .runner import read_log  # noqa: E402


def curve_data(records: Iterable[dict], name: str = "return_mean", split: str = "eval"):
    """Steps, per-step mean and std across seeds for one metric.

    Only steps present for every seed are kept.
    """
    by_seed: Dict[int, Dict[int, float]] = defaultdict(dict)
    for r in records:
        if r["split"] == split and r["name"] == name:
            by_seed[r["seed"]][r["step"]] = r["value"]
    if not by_seed:
        raise EmptyLog(f"no {split}/{name} records")
    steps = sorted(set.intersection(*(set(v) for v in by_seed.values())))
    vals = np.array([[by_seed[s][t] for t in steps] for s in sorted(by_seed)])
    return np.array(steps), vals.mean(0), vals.std(0), len(by_seed)


def plot_curves(groups: Dict[str, List[dict]], path, name: str = "return_mean", split: str = "eval"):
    """One mean line per group with a +-1 std band (omitted for a single seed)."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    plotted = {}
    for label, records in groups.items():
        steps, mean, std, n = curve_data(records, name, split)
        line, = ax.plot(steps, mean, label=label)
        band = None
        if n > 1:
            band = ax.fill_between(steps, mean - std, mean + std, alpha=0.25, color=line.get_color())
        plotted[label] = {"steps": steps, "mean": mean, "std": std, "band": band is not None}
    ax.set_xlabel("environment steps")
    ax.set_ylabel(name.replace("_", " "))
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return plotted


def plot_profile(scores: Dict[str, np.ndarray], path, taus: Sequence[float] = None):
    """Performance profiles; returns the plotted fractions per method."""
    allv = np.concatenate([np.ravel(v) for v in scores.values()])
    taus = np.linspace(min(0.0, allv.min()), allv.max() * 1.05 + 1e-9, 101) if taus is None else np.asarray(taus)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    curves = {}
    for label, x in scores.items():
        frac = performance_profile(x, taus)
        ax.plot(taus, frac, label=label)
        curves[label] = frac
    ax.set_xlabel("normalized score (tau)")
    ax.set_ylabel("fraction of runs with score > tau")
    ax.set_ylim(0, 1.02)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return taus, curves


def emit_plots(log_paths: Dict[str, Sequence], out_dir) -> List[Path]:
    """``log_paths`` maps a method label to its per-seed metric logs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    groups = {}
    for label, paths in log_paths.items():
        records = [r for p in paths for r in read_log(p)]
        if not records:
            raise EmptyLog(f"no records for {label}")
        groups[label] = records
    written = []
    curves = out_dir / "curves.png"
    plot_curves(groups, curves)
    written.append(curves)
    finals = {}
    for label, records in groups.items():
        steps, _, _, _ = curve_data(records)
        last = steps[-1]
        finals[label] = np.array([r["value"] for r in records
                                  if r["split"] == "eval" and r["name"] == "return_mean" and r["step"] == last])
    profile = out_dir / "profile.png"
    plot_profile(finals, profile)
    written.append(profile)
    return written
