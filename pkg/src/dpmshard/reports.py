"""Plot-ready CSV emitters. Rendering is left to external tools."""
from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .diagnostics import alpha_posterior_curve
from .errors import DataIOError, UsageError
from .hyper import AlphaPrior

CONVERGENCE_COLUMNS = ("iteration", "J", "alpha", "heldout_ll", "joint_log_score",
                       "map_s", "reduce_s", "shuffle_s", "true_heldout_ll")
ESS_COLUMNS = ("n_rows", "n_superclusters", "alpha", "sweeps_per_shuffle", "iterations",
               "ess", "ess_per_iteration", "mean_clusters", "expected_clusters")
ALPHA_COLUMNS = ("n_rows", "J", "alpha", "density")
SPEEDUP_COLUMNS = ("workers", "iterations", "mean_map_s", "speedup", "efficiency")
METRICS_COLUMNS = ("iteration", "J", "alpha", "heldout_ll", "averaged_heldout_ll", "true_heldout_ll")


def write_csv(path, columns, rows):
    try:
        with open(Path(path), "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore")
            w.writeheader()
            for row in rows:
                w.writerow({k: _cell(row.get(k)) for k in columns})
    except OSError as e:
        raise DataIOError(f"cannot write {path}: {e}") from e


def read_csv(path) -> list:
    try:
        with open(Path(path), newline="") as f:
            return list(csv.DictReader(f))
    except OSError as e:
        raise DataIOError(f"cannot read {path}: {e}") from e


def _cell(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def convergence_rows(records, true_ll: float | None = None) -> list:
    rows = []
    for r in records:
        t = r.timings or {}
        rows.append({"iteration": r.iteration, "J": r.n_clusters, "alpha": r.alpha, "heldout_ll": r.heldout_ll,
                     "joint_log_score": r.joint_log_score, "map_s": t.get("map"), "reduce_s": t.get("reduce"),
                     "shuffle_s": t.get("shuffle"), "true_heldout_ll": true_ll})
    return rows


def write_convergence_csv(path, records, true_ll: float | None = None):
    write_csv(path, CONVERGENCE_COLUMNS, convergence_rows(records, true_ll))


def write_ess_csv(path, results):
    """``results`` are dicts returned by :func:`prior_chain_experiment`."""
    write_csv(path, ESS_COLUMNS, results)


def alpha_curve_rows(n_rows: int, cluster_counts, prior: AlphaPrior, grid) -> list:
    rows = []
    for j in cluster_counts:
        dens = alpha_posterior_curve(n_rows, j, prior, grid)
        rows.extend({"n_rows": n_rows, "J": j, "alpha": float(a), "density": float(d)} for a, d in zip(grid, dens))
    return rows


def write_alpha_curve_csv(path, n_rows: int, cluster_counts, prior: AlphaPrior, grid):
    write_csv(path, ALPHA_COLUMNS, alpha_curve_rows(n_rows, cluster_counts, prior, grid))


def mean_map_time(records) -> float:
    """Mean map wall-clock over iterations >= 1 (the initial record has no map step)."""
    times = [r.timings.get("map") for r in records if r.iteration > 0 and r.timings.get("map") is not None]
    if not times:
        raise UsageError("no map timings recorded")
    return float(np.mean(times))


def speedup_rows(runs) -> list:
    """``runs`` is a sequence of ``(workers, records)``; speedup is relative to the fewest workers."""
    if not runs:
        raise UsageError("no runs to compare")
    measured = sorted((int(w), mean_map_time(recs), sum(1 for r in recs if r.iteration > 0)) for w, recs in runs)
    base_w, base_t, _ = measured[0]
    rows = []
    for w, t, n in measured:
        speedup = base_t / t if t > 0 else math.inf
        rows.append({"workers": w, "iterations": n, "mean_map_s": t, "speedup": speedup,
                     "efficiency": speedup * base_w / w})
    return rows


def write_speedup_csv(path, runs):
    write_csv(path, SPEEDUP_COLUMNS, speedup_rows(runs))
