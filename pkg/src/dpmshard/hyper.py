"""Hyperparameter kernels shared by the serial and parallel samplers.

``alpha`` is updated by slice sampling on ``log(alpha)`` against
``p(alpha) * Gamma(alpha) / Gamma(N + alpha) * alpha**J``; each ``beta_d``
is redrawn from its conditional evaluated on a fixed grid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import betaln, logsumexp

from .errors import IntegrityError, UsageError

ALPHA_FAMILIES = ("gamma", "lognormal", "flat")


@dataclass(frozen=True)
class AlphaPrior:
    """Prior on the concentration. ``flat`` is improper and meant for curves and tests."""

    family: str = "gamma"
    shape: float = 1.0
    rate: float = 1.0
    log_mean: float = 0.0
    log_sd: float = 1.0

    def __post_init__(self):
        if self.family not in ALPHA_FAMILIES:
            raise UsageError(f"unknown alpha prior family {self.family!r}")
        if self.family == "gamma" and not (self.shape > 0 and self.rate > 0):
            raise UsageError("gamma prior needs positive shape and rate")
        if self.family == "lognormal" and not self.log_sd > 0:
            raise UsageError("lognormal prior needs positive log_sd")

    def logpdf(self, alpha: float) -> float:
        if alpha <= 0:
            return -math.inf
        if self.family == "gamma":
            return (self.shape * math.log(self.rate) - math.lgamma(self.shape)
                    + (self.shape - 1.0) * math.log(alpha) - self.rate * alpha)
        if self.family == "lognormal":
            la = math.log(alpha)
            return (-la - 0.5 * math.log(2 * math.pi) - math.log(self.log_sd)
                    - 0.5 * ((la - self.log_mean) / self.log_sd) ** 2)
        return 0.0

    def mean(self) -> float:
        if self.family == "gamma":
            return self.shape / self.rate
        if self.family == "lognormal":
            return math.exp(self.log_mean + 0.5 * self.log_sd ** 2)
        return 1.0

    def sample(self, rng: np.random.Generator) -> float:
        if self.family == "gamma":
            return float(rng.gamma(self.shape, 1.0 / self.rate))
        if self.family == "lognormal":
            return float(rng.lognormal(self.log_mean, self.log_sd))
        raise UsageError("cannot sample from the flat prior")


def alpha_log_target(alpha: float, n_clusters: int, n_rows: int, prior: AlphaPrior) -> float:
    """Unnormalized log posterior density of ``alpha`` (with respect to ``d alpha``)."""
    if alpha <= 0 or not math.isfinite(alpha):
        return -math.inf
    return (prior.logpdf(alpha) + math.lgamma(alpha) - math.lgamma(n_rows + alpha)
            + n_clusters * math.log(alpha))


def sample_alpha(n_clusters: int, n_rows: int, prior: AlphaPrior, current: float,
                 rng: np.random.Generator, width: float = 1.0) -> float:
    """One slice-sampling update of ``alpha`` on the log scale.

    Step-out is unbounded, followed by shrinkage. Only the total cluster
    count and the number of rows enter the target.
    """
    if n_clusters < 1 or n_rows < n_clusters:
        raise UsageError(f"need 1 <= J <= N, got J={n_clusters}, N={n_rows}")

    def f(u):
        # density of u = log(alpha) carries the Jacobian alpha
        return alpha_log_target(math.exp(u), n_clusters, n_rows, prior) + u if u < 700 else -math.inf

    u0 = math.log(current)
    f0 = f(u0)
    if not math.isfinite(f0):
        raise IntegrityError(f"alpha target is not finite at alpha={current}")
    level = f0 - rng.exponential()
    lo = u0 - width * rng.random()
    hi = lo + width
    while f(lo) > level:
        lo -= width
    while f(hi) > level:
        hi += width
    while True:
        u1 = lo + (hi - lo) * rng.random()
        if f(u1) > level:
            return math.exp(u1)
        if u1 < u0:
            lo = u1
        else:
            hi = u1


def beta_grid(n_points: int = 100, low: float = 1e-2, high: float = 1e2) -> np.ndarray:
    """Geometric grid; a uniform prior over its points is uniform in ``log(beta)``."""
    if n_points < 1 or not 0 < low <= high:
        raise UsageError("beta grid needs n_points >= 1 and 0 < low <= high")
    return np.geomspace(low, high, n_points)


def beta_log_conditional(sizes: np.ndarray, one_counts: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Unnormalized log conditional of each ``beta_d`` at each grid point, shape ``(G, D)``."""
    g = np.asarray(grid, dtype=float)[:, None, None]
    if len(sizes) == 0:
        return np.zeros((len(grid), one_counts.shape[1]))
    n = np.asarray(sizes, dtype=float)[None, :, None]
    h = np.asarray(one_counts, dtype=float)[None, :, :]
    return np.sum(betaln(h + g, n - h + g) - betaln(g, g), axis=1)


def sample_beta_griddy(state, data, grid: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Redraw every ``beta_d`` independently from its grid conditional.

    ``data`` is unused beyond a dimension check: the conditional depends on
    the rows only through the per-cluster counts held in ``state``.
    """
    grid = np.asarray(grid, dtype=float)
    if np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
        raise UsageError("beta grid must be positive and strictly ascending")
    if data is not None and data.n_dims != len(state.beta):
        raise UsageError("dataset and state dimensions disagree")
    _, sizes, counts = state.stacked()
    return sample_beta_from_counts(sizes, counts, grid, rng)


def sample_beta_from_counts(sizes, one_counts, grid, rng: np.random.Generator) -> np.ndarray:
    logc = beta_log_conditional(sizes, one_counts, grid)
    if not np.all(np.isfinite(logc.max(axis=0))):
        raise IntegrityError("beta conditional underflows at every grid point")
    prob = np.exp(logc - logsumexp(logc, axis=0))
    cum = np.cumsum(prob, axis=0)
    u = rng.random(logc.shape[1]) * cum[-1]
    idx = np.minimum((cum < u[None, :]).sum(axis=0), len(grid) - 1)
    return grid[idx]
