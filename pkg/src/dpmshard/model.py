"""Binary data containers and the collapsed Beta-Bernoulli cluster likelihood.

Coin weights are integrated out: a cluster is summarized by its size ``n``
and per-dimension one-counts ``h``, and under a symmetric ``Beta(b_d, b_d)``
prior the posterior predictive of a bit is ``(h_d + b_d) / (n + 2 b_d)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
from scipy.special import betaln

from .errors import UsageError


@dataclass(frozen=True, eq=False)
class BinaryDataset:
    """An ``N x D`` matrix of bits with stable row ids.

    The last ``n_heldout`` rows form the test split. Bits are kept unpacked
    (``uint8``) in memory; the on-disk format packs them.
    """

    bits: np.ndarray
    row_ids: Optional[np.ndarray] = None
    n_heldout: int = 0
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise UsageError(f"bits must be 2-d, got shape {bits.shape}")
        if bits.shape[1] < 1:
            raise UsageError("dataset needs at least one dimension")
        if bits.size and not np.isin(bits, (0, 1)).all():
            raise UsageError("dataset entries must be 0 or 1")
        bits = np.ascontiguousarray(bits, dtype=np.uint8)
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

        n = bits.shape[0]
        row_ids = np.arange(n, dtype=np.int64) if self.row_ids is None else np.asarray(self.row_ids, dtype=np.int64)
        if row_ids.shape != (n,):
            raise UsageError("row_ids must have one entry per row")
        if len(np.unique(row_ids)) != n:
            raise UsageError("row_ids must be unique")
        row_ids.setflags(write=False)
        object.__setattr__(self, "row_ids", row_ids)

        if not 0 <= self.n_heldout <= n:
            raise UsageError(f"n_heldout={self.n_heldout} outside [0, {n}]")
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (n,):
                raise UsageError("labels must have one entry per row")
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)

    @property
    def n_rows(self) -> int:
        return self.bits.shape[0]

    @property
    def n_dims(self) -> int:
        return self.bits.shape[1]

    def _subset(self, sl: slice) -> "BinaryDataset":
        labels = None if self.labels is None else self.labels[sl]
        return BinaryDataset(self.bits[sl], self.row_ids[sl], 0, labels)

    def train(self) -> "BinaryDataset":
        return self._subset(slice(0, self.n_rows - self.n_heldout))

    def test(self) -> "BinaryDataset":
        return self._subset(slice(self.n_rows - self.n_heldout, self.n_rows))


@dataclass
class ClusterStats:
    """Sufficient statistics of one cluster."""

    size: int
    one_counts: np.ndarray
    members: set = field(default_factory=set)

    @property
    def n_dims(self) -> int:
        return len(self.one_counts)

    def copy(self) -> "ClusterStats":
        return ClusterStats(self.size, self.one_counts.copy(), set(self.members))

    @classmethod
    def from_rows(cls, bits: np.ndarray, member_ids: Iterable[int]) -> "ClusterStats":
        """Recompute statistics from raw rows of ``bits`` indexed by ``member_ids``."""
        ids = np.fromiter(member_ids, dtype=np.int64)
        counts = bits[ids].sum(axis=0, dtype=np.int64) if len(ids) else np.zeros(bits.shape[1], np.int64)
        return cls(len(ids), counts, set(ids.tolist()))


def _as_row(row, n_dims: Optional[int] = None) -> np.ndarray:
    row = np.asarray(row, dtype=np.int64)
    if row.ndim != 1:
        raise UsageError("row must be a 1-d bit vector")
    if n_dims is not None and len(row) != n_dims:
        raise UsageError(f"row has {len(row)} dims, expected {n_dims}")
    return row


def add_row(stats: Optional[ClusterStats], row_id: int, row) -> ClusterStats:
    """Return ``stats`` with one more member. ``None`` stands for an empty cluster."""
    if stats is None:
        row = _as_row(row)
        return ClusterStats(1, row.copy(), {int(row_id)})
    row = _as_row(row, stats.n_dims)
    if row_id in stats.members:
        raise UsageError(f"row {row_id} is already a member")
    return ClusterStats(stats.size + 1, stats.one_counts + row, stats.members | {int(row_id)})


def remove_row(stats: Optional[ClusterStats], row_id: int, row) -> Optional[ClusterStats]:
    """Return ``stats`` without ``row_id``, or ``None`` once the cluster is empty."""
    if stats is None or row_id not in stats.members:
        raise UsageError(f"row {row_id} is not a member")
    row = _as_row(row, stats.n_dims)
    if stats.size == 1:
        return None
    return ClusterStats(stats.size - 1, stats.one_counts - row, stats.members - {int(row_id)})


def _check_beta(beta, n_dims: int) -> np.ndarray:
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (n_dims,):
        raise UsageError(f"beta has shape {beta.shape}, expected ({n_dims},)")
    if not np.all(beta > 0):
        raise UsageError("beta must be strictly positive")
    return beta


def log_predictive_row(stats: Optional[ClusterStats], row, beta) -> float:
    """Log posterior predictive of ``row`` under a cluster (or an empty one)."""
    row = _as_row(row)
    beta = _check_beta(beta, len(row))
    if stats is None:
        n, h = 0, np.zeros(len(row))
    else:
        if stats.n_dims != len(row):
            raise UsageError("row and cluster dimensions disagree")
        n, h = stats.size, stats.one_counts
    on = np.where(row == 1, h + beta, n - h + beta)
    return float(np.sum(np.log(on) - np.log(n + 2.0 * beta)))


def log_marginal_cluster(stats: ClusterStats, beta) -> float:
    """Log probability of all member rows jointly, coins integrated out."""
    if stats is None or stats.size < 1:
        raise UsageError("log_marginal_cluster needs a non-empty cluster")
    beta = _check_beta(beta, stats.n_dims)
    h = stats.one_counts
    return float(np.sum(betaln(h + beta, stats.size - h + beta) - betaln(beta, beta)))


def log_predictive_matrix(rows: np.ndarray, sizes: np.ndarray, one_counts: np.ndarray,
                          beta: np.ndarray) -> np.ndarray:
    """Vectorized predictive: entry ``[i, j]`` is log p(rows[i] | cluster j).

    ``sizes`` has shape ``(J,)`` and ``one_counts`` ``(J, D)``; zero-size rows
    give the prior predictive.
    """
    sizes = np.asarray(sizes, dtype=float)[:, None]
    h = np.asarray(one_counts, dtype=float)
    denom = np.log(sizes + 2.0 * beta)
    log_on = np.log(h + beta) - denom
    log_off = np.log(sizes - h + beta) - denom
    rows = np.asarray(rows, dtype=float)
    return rows @ log_on.T + (1.0 - rows) @ log_off.T


def log_marginal_clusters(sizes: np.ndarray, one_counts: np.ndarray, beta: np.ndarray) -> float:
    """Sum of ``log_marginal_cluster`` over a stack of clusters."""
    if len(sizes) == 0:
        return 0.0
    n = np.asarray(sizes, dtype=float)[:, None]
    h = np.asarray(one_counts, dtype=float)
    return float(np.sum(betaln(h + beta, n - h + beta) - betaln(beta, beta)))
