"""Observables recorded per iteration and used to judge correctness."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import trapezoid
from scipy.special import logsumexp

from .errors import IntegrityError, UsageError
from .hyper import AlphaPrior, alpha_log_target
from .model import BinaryDataset, log_predictive_matrix
from .state import MixtureState, joint_log_score

TRACE_SCHEMA = "dpmshard.trace"
TRACE_VERSION = "1.0"


@dataclass
class ChainRecord:
    iteration: int
    n_clusters: int
    clusters_per_supercluster: list
    rows_per_supercluster: list
    alpha: float
    beta_min: float
    beta_median: float
    beta_max: float
    heldout_ll: float | None
    joint_log_score: float
    timings: dict = field(default_factory=dict)

    @classmethod
    def from_state(cls, state: MixtureState, test: BinaryDataset | None = None,
                   timings: dict | None = None) -> "ChainRecord":
        ll = None
        if test is not None and test.n_rows:
            ll = float(np.mean(heldout_log_predictive(state, test)))
        beta = state.beta
        return cls(
            iteration=int(state.iteration),
            n_clusters=state.n_clusters,
            clusters_per_supercluster=[int(v) for v in state.clusters_per_supercluster()],
            rows_per_supercluster=[int(v) for v in state.rows_per_supercluster()],
            alpha=float(state.alpha),
            beta_min=float(beta.min()),
            beta_median=float(np.median(beta)),
            beta_max=float(beta.max()),
            heldout_ll=ll,
            joint_log_score=float(joint_log_score(state)),
            timings=dict(timings or {"map": 0.0, "reduce": 0.0, "shuffle": 0.0}),
        )

    def trace_dict(self) -> dict:
        """Deterministic part of the record (everything except wall-clock)."""
        return {
            "iteration": self.iteration,
            "J": self.n_clusters,
            "J_k": self.clusters_per_supercluster,
            "n_k": self.rows_per_supercluster,
            "alpha": self.alpha,
            "beta": {"min": self.beta_min, "median": self.beta_median, "max": self.beta_max},
            "heldout_ll": self.heldout_ll,
            "joint_log_score": self.joint_log_score,
        }

    def timing_dict(self) -> dict:
        return {"iteration": self.iteration, **{k: float(v) for k, v in self.timings.items()}}

    @classmethod
    def from_dicts(cls, trace: dict, timing: dict | None = None) -> "ChainRecord":
        timing = dict(timing or {})
        timing.pop("iteration", None)
        return cls(trace["iteration"], trace["J"], trace["J_k"], trace["n_k"], trace["alpha"],
                   trace["beta"]["min"], trace["beta"]["median"], trace["beta"]["max"],
                   trace["heldout_ll"], trace["joint_log_score"], timing)


def predictive_weights(state: MixtureState):
    """CRP weights of the existing clusters and of a new one; they sum to 1."""
    _, sizes, counts = state.stacked()
    denom = state.n_rows + state.alpha
    return sizes / denom, state.alpha / denom, sizes, counts


def heldout_log_predictive(state: MixtureState, test: BinaryDataset) -> np.ndarray:
    """Per-row log predictive density of ``test`` given one posterior state."""
    if test.n_dims != len(state.beta):
        raise UsageError(f"test set has {test.n_dims} dims, state has {len(state.beta)}")
    w, w_new, sizes, counts = predictive_weights(state)
    all_sizes = np.append(sizes, 0)
    all_counts = np.vstack([counts, np.zeros((1, counts.shape[1]), counts.dtype)])
    with np.errstate(divide="ignore"):
        log_w = np.log(np.append(w, w_new))
    lp = log_predictive_matrix(test.bits, all_sizes, all_counts, state.beta)
    return logsumexp(lp + log_w[None, :], axis=1)


def average_predictive(states, test: BinaryDataset) -> np.ndarray:
    """Per-row log of the predictive density averaged over ``states``."""
    rows = [heldout_log_predictive(s, test) for s in states]
    if not rows:
        raise UsageError("average_predictive needs at least one state")
    return log_mean_exp(np.vstack(rows))


def log_mean_exp(per_state_rows: np.ndarray) -> np.ndarray:
    m = np.asarray(per_state_rows, dtype=float)
    return logsumexp(m, axis=0) - math.log(m.shape[0])


def alpha_posterior_curve(n_rows: int, n_clusters: int, prior: AlphaPrior, grid) -> np.ndarray:
    """Posterior density of ``alpha`` on ``grid``, normalized by trapezoid quadrature."""
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or len(grid) < 2 or np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
        raise UsageError("grid must be positive and strictly ascending with >= 2 points")
    log_t = np.array([alpha_log_target(a, n_clusters, n_rows, prior) for a in grid])
    top = np.max(log_t)
    if not np.isfinite(top):
        raise IntegrityError("alpha posterior underflows at every grid point")
    dens = np.exp(log_t - top)
    return dens / trapezoid(dens, grid)


def curve_mode(grid, density) -> float:
    return float(np.asarray(grid)[int(np.argmax(density))])


def convergence_report(iterations, heldout, n_clusters, ll_tol: float = 0.02, j_tol: float = 0.10) -> dict:
    """First iterations after which the held-out score stays within ``ll_tol``
    (relative) of its final level, and the cluster count within ``j_tol``.

    The final level is the mean over the last tenth of the trace.
    """
    it = np.asarray(iterations)
    ll = np.asarray(heldout, dtype=float)
    j = np.asarray(n_clusters, dtype=float)

    def settle(v, tol):
        final = v[-max(1, len(v) // 10):].mean()
        ok = np.abs(v - final) <= tol * abs(final)
        bad = np.flatnonzero(~ok)
        return int(it[0] if len(bad) == 0 else it[min(bad[-1] + 1, len(it) - 1)])

    ll_it = settle(ll, ll_tol)
    j_it = settle(j, j_tol)
    return {
        "final_heldout_ll": float(ll[-max(1, len(ll) // 10):].mean()),
        "final_J": float(j[-max(1, len(j) // 10):].mean()),
        "iterations_to_ll_within_2pct": ll_it,
        "iterations_to_J_within_10pct": j_it,
        "predictive_converges_first": ll_it <= j_it,
    }
