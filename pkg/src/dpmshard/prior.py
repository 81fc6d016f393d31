"""Two-stage (supercluster) Chinese restaurant process and exact partition oracles.

Superclusters are numbered ``0..K-1``. A customer first picks supercluster
``k`` with probability ``(alpha*mu_k + #_k) / (alpha + n - 1)``, then a table
inside it by a local CRP with concentration ``alpha*mu_k``. Marginally the
induced partition is CRP(alpha) for every choice of ``mu``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import UsageError

MAX_ENUMERATION_ROWS = 12


@dataclass(frozen=True)
class ConcentrationSpec:
    alpha: float
    mu: tuple

    def __post_init__(self):
        mu = tuple(float(m) for m in np.atleast_1d(self.mu))
        object.__setattr__(self, "mu", mu)
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise UsageError(f"alpha must be positive and finite, got {self.alpha}")
        if not mu or min(mu) < 0 or abs(sum(mu) - 1.0) > 1e-9:
            raise UsageError(f"mu must lie on the simplex, got {mu}")

    @classmethod
    def uniform(cls, alpha: float, n_superclusters: int) -> "ConcentrationSpec":
        return cls(alpha, (1.0 / n_superclusters,) * n_superclusters)

    @property
    def n_superclusters(self) -> int:
        return len(self.mu)


@dataclass
class PartitionAssignment:
    """Row-to-cluster labels ``z`` plus cluster-to-supercluster map ``s``."""

    z: np.ndarray
    s: dict = field(default_factory=dict)

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.int64)

    def validate(self, n_superclusters: int | None = None):
        used = set(np.unique(self.z).tolist())
        missing = used - set(self.s)
        if missing:
            raise UsageError(f"clusters {sorted(missing)} have no supercluster")
        empty = set(self.s) - used
        if empty:
            raise UsageError(f"clusters {sorted(empty)} have no members")
        if n_superclusters is not None and any(not 0 <= k < n_superclusters for k in self.s.values()):
            raise UsageError("supercluster index out of range")

    def cluster_sizes(self) -> dict:
        ids, counts = np.unique(self.z, return_counts=True)
        return dict(zip(ids.tolist(), counts.tolist()))

    def clusters_per_supercluster(self, n_superclusters: int) -> np.ndarray:
        return np.bincount(np.fromiter(self.s.values(), dtype=np.int64, count=len(self.s)),
                           minlength=n_superclusters)


def supercluster_choice_logprobs(spec: ConcentrationSpec, counts, n_seen: int) -> np.ndarray:
    """Log-probabilities that customer ``n_seen`` picks each supercluster."""
    counts = np.asarray(counts, dtype=float)
    if counts.shape != (spec.n_superclusters,):
        raise UsageError("need one count per supercluster")
    if n_seen < 1 or counts.sum() != n_seen - 1 or np.any(counts < 0):
        raise UsageError(f"counts sum to {counts.sum()} but {n_seen - 1} customers are seated")
    with np.errstate(divide="ignore"):
        return np.log(spec.alpha * np.asarray(spec.mu) + counts) - math.log(spec.alpha + n_seen - 1)


def local_table_logprobs(alpha_mu: float, local_sizes, include_new: bool = True) -> np.ndarray:
    """Log-probabilities of joining each existing table, new table last."""
    sizes = np.asarray(local_sizes, dtype=float)
    if np.any(sizes <= 0):
        raise UsageError("table sizes must be positive")
    if len(sizes) == 0 and not include_new:
        raise UsageError("no tables to choose from")
    if include_new:
        if alpha_mu <= 0:
            raise UsageError("new-table weight must be positive")
        w = np.append(sizes, alpha_mu)
    else:
        w = sizes
    return np.log(w) - math.log(w.sum())


def _pick(weights: list, total: float, u: float) -> int:
    target = u * total
    acc = 0.0
    for i, w in enumerate(weights):
        acc += w
        if target < acc:
            return i
    return len(weights) - 1


def two_stage_crp_sample(n_rows: int, spec: ConcentrationSpec, rng: np.random.Generator) -> PartitionAssignment:
    """Seat ``n_rows`` customers by the two-stage process; cluster ids are 0, 1, ... in order of creation."""
    alpha_mu = [spec.alpha * m for m in spec.mu]
    sc_count = [0] * spec.n_superclusters
    tables: list[list[int]] = [[] for _ in alpha_mu]  # cluster ids per supercluster
    sizes: list[int] = []
    s: dict[int, int] = {}
    z = np.empty(n_rows, dtype=np.int64)
    u = rng.random(2 * n_rows)
    for n in range(n_rows):
        k = _pick([a + c for a, c in zip(alpha_mu, sc_count)], spec.alpha + n, u[2 * n])
        local = tables[k]
        i = _pick([sizes[j] for j in local] + [alpha_mu[k]], sc_count[k] + alpha_mu[k], u[2 * n + 1])
        if i == len(local):
            j = len(sizes)
            sizes.append(0)
            local.append(j)
            s[j] = k
        else:
            j = local[i]
        sizes[j] += 1
        sc_count[k] += 1
        z[n] = j
    return PartitionAssignment(z, s)


def crp_sample(n_rows: int, alpha: float, rng: np.random.Generator) -> np.ndarray:
    """Plain sequential CRP labels."""
    sizes: list[int] = []
    z = np.empty(n_rows, dtype=np.int64)
    u = rng.random(n_rows)
    for n in range(n_rows):
        j = _pick(sizes + [alpha], n + alpha, u[n])
        if j == len(sizes):
            sizes.append(0)
        sizes[j] += 1
        z[n] = j
    return z


def joint_log_prior(pa: PartitionAssignment, spec: ConcentrationSpec) -> float:
    """Log probability of the labelled seating ``(z, s)``.

    ``lgamma(a) - lgamma(N + a) + J log a + sum_k J_k log mu_k + sum_j lgamma(#_j)``.
    The last term is the within-cluster seating factor; without it the value
    would not normalize over partitions.
    """
    pa.validate(spec.n_superclusters)
    n = len(pa.z)
    a = spec.alpha
    sizes = pa.cluster_sizes()
    j_k = pa.clusters_per_supercluster(spec.n_superclusters)
    out = math.lgamma(a) - math.lgamma(n + a) + len(sizes) * math.log(a)
    for k, jk in enumerate(j_k):
        if jk:
            if spec.mu[k] == 0:
                return -math.inf
            out += jk * math.log(spec.mu[k])
    return out + sum(math.lgamma(c) for c in sizes.values())


def canonical_partition(labels: Sequence[int]) -> tuple:
    """Blocks of row indices, each sorted, ordered by least element."""
    blocks: dict[int, list[int]] = {}
    for i, lab in enumerate(labels):
        blocks.setdefault(int(lab), []).append(i)
    return tuple(sorted((tuple(b) for b in blocks.values()), key=lambda b: b[0]))


def partition_labels(partition: Iterable[Iterable[int]]) -> np.ndarray:
    """Inverse of :func:`canonical_partition`."""
    blocks = [list(b) for b in partition]
    n = sum(len(b) for b in blocks)
    z = np.full(n, -1, dtype=np.int64)
    for j, b in enumerate(blocks):
        z[b] = j
    if np.any(z < 0):
        raise UsageError("blocks must cover 0..N-1 exactly once")
    return z


def format_partition(partition) -> str:
    return " | ".join(" ".join(str(i) for i in b) for b in partition)


def parse_partition(line: str) -> tuple:
    blocks = [tuple(sorted(int(t) for t in chunk.split())) for chunk in line.split("|") if chunk.strip()]
    return tuple(sorted(blocks, key=lambda b: b[0]))


def _guard(n_rows: int):
    if n_rows < 0:
        raise UsageError("n_rows must be non-negative")
    if n_rows > MAX_ENUMERATION_ROWS:
        raise UsageError(f"exact enumeration is limited to N <= {MAX_ENUMERATION_ROWS}, got {n_rows}")


def _restricted_growth(n: int) -> Iterator[list]:
    if n == 0:
        yield []
        return
    z = [0] * n
    top = [0] * n  # top[i] = max(z[:i+1])

    def rec(i):
        if i == n:
            yield list(z)
            return
        for v in range(top[i - 1] + 2):
            z[i] = v
            top[i] = max(top[i - 1], v)
            yield from rec(i + 1)

    yield from rec(1)


def enumerate_partitions(n_rows: int) -> list:
    """All set partitions of ``{0..n_rows-1}`` in canonical form (Bell(n) of them)."""
    _guard(n_rows)
    return [canonical_partition(z) for z in _restricted_growth(n_rows)]


def eppf_exact(partition, alpha: float) -> float:
    """CRP probability of an (unlabelled) set partition."""
    sizes = [len(b) for b in partition]
    n = sum(sizes)
    _guard(n)
    if alpha <= 0:
        raise UsageError("alpha must be positive")
    log_p = math.lgamma(alpha) - math.lgamma(n + alpha) + len(sizes) * math.log(alpha)
    log_p += sum(math.lgamma(c) for c in sizes)
    return math.exp(log_p)


def expected_clusters(n_rows: int, alpha: float) -> float:
    """Mean number of CRP(alpha) tables after ``n_rows`` customers."""
    return float(sum(alpha / (alpha + i) for i in range(n_rows)))
