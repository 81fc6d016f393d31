"""The full latent state of the sampler and its consistency checks."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import IntegrityError
from .model import BinaryDataset, ClusterStats, log_marginal_clusters
from .prior import ConcentrationSpec, PartitionAssignment, joint_log_prior


@dataclass
class MixtureState:
    assignment: PartitionAssignment
    clusters: dict
    spec: ConcentrationSpec
    beta: np.ndarray
    next_cluster_id: int
    iteration: int = 0

    @property
    def z(self) -> np.ndarray:
        return self.assignment.z

    @property
    def s(self) -> dict:
        return self.assignment.s

    @property
    def alpha(self) -> float:
        return self.spec.alpha

    @property
    def n_rows(self) -> int:
        return len(self.assignment.z)

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    @property
    def n_superclusters(self) -> int:
        return self.spec.n_superclusters

    def with_alpha(self, alpha: float) -> "MixtureState":
        return replace(self, spec=ConcentrationSpec(alpha, self.spec.mu))

    def cluster_ids(self) -> np.ndarray:
        return np.array(sorted(self.clusters), dtype=np.int64)

    def stacked(self):
        """``(ids, sizes, one_counts)`` arrays in ascending id order."""
        ids = self.cluster_ids()
        if len(ids) == 0:
            return ids, np.zeros(0, np.int64), np.zeros((0, len(self.beta)), np.int64)
        sizes = np.array([self.clusters[j].size for j in ids], dtype=np.int64)
        counts = np.stack([self.clusters[j].one_counts for j in ids])
        return ids, sizes, counts

    def clusters_per_supercluster(self) -> np.ndarray:
        return self.assignment.clusters_per_supercluster(self.n_superclusters)

    def rows_per_supercluster(self) -> np.ndarray:
        out = np.zeros(self.n_superclusters, dtype=np.int64)
        for j, c in self.clusters.items():
            out[self.s[j]] += c.size
        return out

    def copy(self) -> "MixtureState":
        return MixtureState(
            PartitionAssignment(self.z.copy(), dict(self.s)),
            {j: c.copy() for j, c in self.clusters.items()},
            self.spec,
            self.beta.copy(),
            self.next_cluster_id,
            self.iteration,
        )


def registry_from_labels(bits: np.ndarray, z: np.ndarray) -> dict:
    """Build ``{cluster id: ClusterStats}`` from row labels in one pass."""
    z = np.asarray(z, dtype=np.int64)
    if len(z) == 0:
        return {}
    order = np.argsort(z, kind="stable")
    zs = z[order]
    starts = np.flatnonzero(np.r_[True, zs[1:] != zs[:-1]])
    counts = np.add.reduceat(bits[order].astype(np.int64), starts, axis=0)
    ends = np.r_[starts[1:], len(z)]
    return {
        int(zs[a]): ClusterStats(int(b - a), counts[i], set(order[a:b].tolist()))
        for i, (a, b) in enumerate(zip(starts, ends))
    }


def state_from_assignment(bits: np.ndarray, pa: PartitionAssignment, spec: ConcentrationSpec,
                          beta, iteration: int = 0) -> MixtureState:
    clusters = registry_from_labels(bits, pa.z)
    next_id = max(clusters, default=-1) + 1
    return MixtureState(pa, clusters, spec, np.asarray(beta, dtype=float).copy(), next_id, iteration)


def check_state(state: MixtureState, data: BinaryDataset | None = None):
    """Raise :class:`IntegrityError` unless every state invariant holds.

    With ``data`` the stored one-counts are also recomputed from raw rows.
    """
    z = state.z
    n = len(z)
    ids = set(state.clusters)
    if set(state.s) != ids:
        raise IntegrityError("supercluster map and cluster registry disagree")
    if any(not 0 <= k < state.n_superclusters for k in state.s.values()):
        raise IntegrityError("supercluster index out of range")
    if ids and state.next_cluster_id <= max(ids):
        raise IntegrityError("next_cluster_id does not exceed issued ids")
    if n and not set(np.unique(z).tolist()) <= ids:
        raise IntegrityError("a row points at an unregistered cluster")
    total = 0
    for j, c in state.clusters.items():
        if c.size < 1 or c.size != len(c.members):
            raise IntegrityError(f"cluster {j} has size {c.size} with {len(c.members)} members")
        if np.any(c.one_counts < 0) or np.any(c.one_counts > c.size):
            raise IntegrityError(f"cluster {j} has impossible one-counts")
        members = np.fromiter(c.members, dtype=np.int64, count=c.size)
        if np.any(members >= n) or np.any(z[members] != j):
            raise IntegrityError(f"cluster {j} members disagree with z")
        if data is not None and not np.array_equal(data.bits[members].sum(axis=0, dtype=np.int64), c.one_counts):
            raise IntegrityError(f"cluster {j} one-counts disagree with the data")
        total += c.size
    if total != n:
        raise IntegrityError(f"cluster sizes sum to {total}, expected {n}")
    if len(state.beta) and not np.all(state.beta > 0):
        raise IntegrityError("beta must be positive")
    if not (state.alpha > 0 and math.isfinite(state.alpha)):
        raise IntegrityError("alpha must be positive and finite")


def joint_log_score(state: MixtureState) -> float:
    """Log prior of the labelled seating plus the collapsed data likelihood."""
    if state.n_rows == 0:
        return 0.0
    _, sizes, counts = state.stacked()
    return joint_log_prior(state.assignment, state.spec) + log_marginal_clusters(sizes, counts, state.beta)
