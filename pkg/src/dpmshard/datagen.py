"""Synthetic data from a balanced finite mixture of product-Bernoulli clusters."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, UsageError
from .model import BinaryDataset

DEFAULT_BETA_GEN = 0.1
DEFAULT_HELDOUT_FRACTION = 0.05


@dataclass(frozen=True)
class GeneratorSpec:
    n_rows: int
    n_dims: int
    n_clusters: int
    beta_gen: tuple = ()
    seed: int = 0
    heldout_fraction: float = DEFAULT_HELDOUT_FRACTION

    def __post_init__(self):
        beta = np.atleast_1d(np.asarray(self.beta_gen, dtype=float))
        if beta.size == 0:
            beta = np.array([DEFAULT_BETA_GEN])
        if beta.size == 1:
            beta = np.repeat(beta, max(self.n_dims, 1))
        object.__setattr__(self, "beta_gen", tuple(float(b) for b in beta))
        if self.n_dims < 1:
            raise ConfigError("n_dims must be >= 1")
        if self.n_clusters < 1:
            raise ConfigError("n_clusters must be >= 1")
        if self.n_rows < self.n_clusters:
            raise ConfigError(f"n_rows={self.n_rows} is smaller than n_clusters={self.n_clusters}")
        if len(self.beta_gen) != self.n_dims or min(self.beta_gen) <= 0:
            raise ConfigError("beta_gen needs one positive value per dimension")
        if not 0 <= self.heldout_fraction < 1:
            raise ConfigError("heldout_fraction must lie in [0, 1)")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    @property
    def n_heldout(self) -> int:
        return int(round(self.heldout_fraction * self.n_rows))


@dataclass
class GroundTruth:
    true_z: np.ndarray
    theta: np.ndarray
    heldout_ll_per_row: float
    beta_gen: tuple = ()
    spec: dict = field(default_factory=dict)

    @property
    def n_clusters(self) -> int:
        return self.theta.shape[0]


def generate(spec: GeneratorSpec) -> tuple:
    """Draw a dataset and its generating parameters.

    Labels go round-robin (``z_n = n mod J``) so sizes differ by at most one
    and the trailing held-out rows are stratified across clusters.
    """
    rng = np.random.default_rng(spec.seed)
    beta = np.asarray(spec.beta_gen)
    theta = rng.beta(beta, beta, size=(spec.n_clusters, spec.n_dims))
    # small beta can round draws onto 0 or 1
    theta = np.clip(theta, np.finfo(float).tiny, np.nextafter(1.0, 0.0))
    z = np.arange(spec.n_rows, dtype=np.int64) % spec.n_clusters
    bits = (rng.random((spec.n_rows, spec.n_dims)) < theta[z]).astype(np.uint8)
    data = BinaryDataset(bits, n_heldout=spec.n_heldout, labels=z)
    truth = GroundTruth(z, theta, float("nan"), spec.beta_gen, spec_dict(spec))
    if spec.n_heldout:
        truth.heldout_ll_per_row = true_heldout_ll(truth, data.test())
    return data, truth


def spec_dict(spec: GeneratorSpec) -> dict:
    return {
        "n_rows": spec.n_rows,
        "n_dims": spec.n_dims,
        "n_clusters": spec.n_clusters,
        "beta_gen": list(spec.beta_gen),
        "seed": spec.seed,
        "heldout_fraction": spec.heldout_fraction,
    }


def row_log_likelihoods(theta: np.ndarray, bits: np.ndarray) -> np.ndarray:
    """Per-row log density under the equal-weight mixture with coin weights ``theta``."""
    x = np.asarray(bits, dtype=float)
    per_cluster = x @ np.log(theta).T + (1.0 - x) @ np.log1p(-theta).T
    return logsumexp(per_cluster, axis=1) - np.log(theta.shape[0])


def true_heldout_ll(truth: GroundTruth, test: BinaryDataset) -> float:
    """Mean per-row log-likelihood of ``test`` under the generating mixture."""
    if test.n_dims != truth.theta.shape[1]:
        raise UsageError("test set and ground truth dimensions disagree")
    if test.n_rows == 0:
        raise UsageError("empty test set")
    return float(np.mean(row_log_likelihoods(truth.theta, test.bits)))
