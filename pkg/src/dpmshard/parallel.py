"""Supercluster sharding: concurrent per-shard Gibbs (map), then centralized
hyperparameter updates and cluster reassignment (reduce / shuffle).

Rows never leave their supercluster during a map step; they move between
superclusters only when the shuffle reassigns whole clusters.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import streams
from .errors import IntegrityError, UsageError, WorkerError
from .ess import ess
from .hyper import AlphaPrior, sample_alpha, sample_beta_from_counts
from .kernels import sweep_shard
from .model import ClusterStats
from .prior import ConcentrationSpec, PartitionAssignment, expected_clusters, two_stage_crp_sample
from .state import MixtureState

SHUFFLE_MODES = ("derived", "eq7-literal")


@dataclass
class SuperclusterShard:
    """The slice of the state owned by one map task.

    ``labels[i]`` indexes the local cluster arrays for row ``row_ids[i]``;
    ``cluster_ids`` holds global ids, with -1 marking clusters opened during
    the current map step (ids are issued at merge time).
    """

    k: int
    alpha_mu: float
    beta: np.ndarray
    row_ids: np.ndarray
    labels: np.ndarray
    cluster_ids: np.ndarray
    sizes: np.ndarray
    one_counts: np.ndarray
    seed: int = 0
    iteration: int = 0

    @property
    def n_rows(self) -> int:
        return len(self.row_ids)

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_ids)

    @property
    def n_new(self) -> int:
        return int(np.sum(self.cluster_ids < 0))

    def rng(self) -> np.random.Generator:
        return streams.stream(self.seed, streams.MAP, self.iteration, self.k)

    @property
    def local_clusters(self) -> dict:
        """``{id: ClusterStats}``; clusters opened this step get ids -1, -2, ..."""
        out = {}
        fresh = -1
        order = np.argsort(self.labels, kind="stable")
        bounds = np.searchsorted(self.labels[order], np.arange(self.n_clusters + 1))
        for c, gid in enumerate(self.cluster_ids):
            if gid < 0:
                gid, fresh = fresh, fresh - 1
            members = set(self.row_ids[order[bounds[c]:bounds[c + 1]]].tolist())
            out[int(gid)] = ClusterStats(int(self.sizes[c]), self.one_counts[c].copy(), members)
        return out

    def validate(self):
        if len(self.labels) != self.n_rows:
            raise IntegrityError(f"shard {self.k}: labels and rows differ in length")
        if self.n_rows and (self.labels.min() < 0 or self.labels.max() >= self.n_clusters):
            raise IntegrityError(f"shard {self.k}: label out of range")
        if not np.array_equal(np.bincount(self.labels, minlength=self.n_clusters), self.sizes):
            raise IntegrityError(f"shard {self.k}: sizes disagree with labels")
        if np.any(self.sizes < 1):
            raise IntegrityError(f"shard {self.k}: empty local cluster")


def shard_state(state: MixtureState, seed: int = 0) -> list:
    """Split the state into one shard per supercluster, ordered by supercluster id."""
    ids, sizes, counts = state.stacked()
    sc = np.array([state.s[j] for j in ids], dtype=np.int64)
    z = state.z
    row_sc = sc[np.searchsorted(ids, z)] if len(z) else np.zeros(0, np.int64)
    shards = []
    for k in range(state.n_superclusters):
        sel = sc == k
        ids_k = ids[sel]
        rows = np.flatnonzero(row_sc == k).astype(np.int64)
        shards.append(SuperclusterShard(
            k=k,
            alpha_mu=state.alpha * state.spec.mu[k],
            beta=state.beta.copy(),
            row_ids=rows,
            labels=np.searchsorted(ids_k, z[rows]).astype(np.int64),
            cluster_ids=ids_k.copy(),
            sizes=sizes[sel].copy(),
            one_counts=counts[sel].copy(),
            seed=seed,
            iteration=state.iteration,
        ))
    return shards


def map_sweep(shard: SuperclusterShard, data, sweeps: int = 1) -> SuperclusterShard:
    """``sweeps`` collapsed-Gibbs passes over the shard with concentration ``alpha * mu_k``."""
    if sweeps < 1:
        raise UsageError("sweeps must be >= 1")
    m, c = shard.n_rows, shard.n_clusters
    if m == 0:
        return shard
    if shard.alpha_mu <= 0:
        raise UsageError(f"shard {shard.k} has non-positive alpha*mu_k but owns rows")
    bits = data.bits
    cap = max(m, c) + 1
    sizes = np.zeros(cap, np.int64)
    sizes[:c] = shard.sizes
    counts = np.zeros((cap, bits.shape[1]), np.int64)
    counts[:c] = shard.one_counts
    origin = np.full(cap, -1, np.int64)
    origin[:c] = np.arange(c)
    labels = shard.labels.copy()

    rng = shard.rng()
    order = np.stack([rng.permutation(m) for _ in range(sweeps)]).astype(np.int64)
    uniforms = rng.random((sweeps, m))
    sweep_shard(bits, shard.row_ids, labels, sizes, counts, origin, c,
                math.log(shard.alpha_mu), np.asarray(shard.beta, dtype=float), order, uniforms)

    used = np.flatnonzero(sizes > 0)
    remap = np.full(cap, -1, np.int64)
    remap[used] = np.arange(len(used))
    cluster_ids = np.where(origin[used] >= 0, shard.cluster_ids[np.maximum(origin[used], 0)], -1)
    out = SuperclusterShard(shard.k, shard.alpha_mu, shard.beta, shard.row_ids, remap[labels],
                            cluster_ids.astype(np.int64), sizes[used], counts[used],
                            shard.seed, shard.iteration)
    if np.any(out.labels < 0):
        raise IntegrityError(f"shard {shard.k}: row left in an empty slot")
    return out


@dataclass
class ShuffleReport:
    """What the reduce step receives from the mappers."""

    clusters_per_shard: list
    rows_per_shard: list
    new_clusters: list
    sizes: np.ndarray
    one_counts: np.ndarray
    timings: dict = field(default_factory=dict)

    @property
    def n_clusters(self) -> int:
        return int(sum(self.clusters_per_shard))


def merge_shards(shards: list, template: MixtureState) -> tuple:
    """Reassemble a state from mapped shards. New clusters get ids in (k, local) order."""
    n = template.n_rows
    seen_rows = np.zeros(n, dtype=bool)
    z = np.empty(n, dtype=np.int64)
    s: dict = {}
    clusters: dict = {}
    next_id = template.next_cluster_id
    ordered = sorted(shards, key=lambda sh: sh.k)
    for shard in ordered:
        if np.any(seen_rows[shard.row_ids]):
            raise IntegrityError(f"shard {shard.k} overlaps another shard's rows")
        seen_rows[shard.row_ids] = True
        gids = shard.cluster_ids.copy()
        for c in np.flatnonzero(gids < 0):
            gids[c] = next_id
            next_id += 1
        order = np.argsort(shard.labels, kind="stable")
        bounds = np.searchsorted(shard.labels[order], np.arange(shard.n_clusters + 1))
        for c, gid in enumerate(gids.tolist()):
            if gid in clusters:
                raise IntegrityError(f"cluster {gid} appears in two shards")
            members = shard.row_ids[order[bounds[c]:bounds[c + 1]]]
            clusters[gid] = ClusterStats(int(shard.sizes[c]), shard.one_counts[c], set(members.tolist()))
            s[gid] = shard.k
        z[shard.row_ids] = gids[shard.labels]
    if not seen_rows.all():
        raise IntegrityError("shards do not cover every row")
    report = ShuffleReport(
        clusters_per_shard=[sh.n_clusters for sh in ordered],
        rows_per_shard=[sh.n_rows for sh in ordered],
        new_clusters=[sh.n_new for sh in ordered],
        sizes=np.concatenate([sh.sizes for sh in ordered]) if shards else np.zeros(0, np.int64),
        one_counts=(np.concatenate([sh.one_counts for sh in ordered]) if shards
                    else np.zeros((0, len(template.beta)), np.int64)),
    )
    state = MixtureState(PartitionAssignment(z, s), clusters, template.spec, template.beta.copy(),
                         next_id, template.iteration)
    return state, report


def supercluster_probs(spec: ConcentrationSpec, mode: str, others_per_supercluster=None) -> np.ndarray:
    """Conditional of one cluster's supercluster given how many other clusters each holds."""
    mu = np.asarray(spec.mu)
    if mode == "derived":
        return mu.copy()
    if mode != "eq7-literal":
        raise UsageError(f"unknown shuffle mode {mode!r}")
    j_k = np.asarray(others_per_supercluster, dtype=float)
    w = mu * (spec.alpha * mu + j_k) / (spec.alpha + j_k.sum())
    return w / w.sum()


def sample_supercluster_assignments(cluster_ids, spec: ConcentrationSpec, mode: str,
                                    rng: np.random.Generator, current: dict | None = None) -> dict:
    """Resample ``s_j`` for every listed cluster by single-site Gibbs.

    ``derived``: ``Pr(s_j = k) = mu_k``, the exact conditional of the joint
    prior (every count-dependent factor cancels). ``eq7-literal``: the
    rich-get-richer form ``mu_k (alpha mu_k + J_{k-j}) / (alpha + sum J_{-j})``,
    kept only for comparison; it does not leave the posterior invariant.
    """
    ids = sorted(int(j) for j in cluster_ids)
    n_sc = spec.n_superclusters
    if mode == "derived":
        draws = rng.choice(n_sc, size=len(ids), p=supercluster_probs(spec, mode)) if ids else []
        out = dict(current or {})
        out.update({j: int(k) for j, k in zip(ids, draws)})
        return out
    if mode != "eq7-literal":
        raise UsageError(f"unknown shuffle mode {mode!r}")
    if current is None or not set(ids) <= set(current):
        raise UsageError("eq7-literal mode needs the current assignment of every cluster")
    out = dict(current)
    # counts cover every cluster in the assignment, not only the ones being moved
    j_k = np.bincount(list(out.values()), minlength=n_sc).astype(float)
    for j in ids:
        j_k[out[j]] -= 1
        k = int(rng.choice(n_sc, p=supercluster_probs(spec, mode, j_k)))
        out[j] = k
        j_k[k] += 1
    return out


def update_hyperparameters(state: MixtureState, report: ShuffleReport, alpha_prior: AlphaPrior,
                           grid: np.ndarray, rng: np.random.Generator, update_alpha: bool = True) -> MixtureState:
    """Centralized ``alpha`` and ``beta`` updates from the mappers' summaries."""
    if update_alpha and state.n_rows:
        alpha = sample_alpha(report.n_clusters, state.n_rows, alpha_prior, state.alpha, rng)
        state = state.with_alpha(alpha)
    state.beta = sample_beta_from_counts(report.sizes, report.one_counts, grid, rng)
    return state


def shuffle_clusters(state: MixtureState, mode: str, rng: np.random.Generator) -> MixtureState:
    state.assignment.s = sample_supercluster_assignments(list(state.clusters), state.spec, mode, rng, state.s)
    return state


def reduce_step(shards: list, template: MixtureState, alpha_prior: AlphaPrior, grid: np.ndarray,
                rng: np.random.Generator, mode: str = "derived", update_alpha: bool = True,
                timings: dict | None = None) -> MixtureState:
    """Merge shards, update ``alpha`` and ``beta``, and reassign clusters to superclusters."""
    t0 = time.perf_counter()
    state, report = merge_shards(shards, template)
    state = update_hyperparameters(state, report, alpha_prior, grid, rng, update_alpha)
    t1 = time.perf_counter()
    state = shuffle_clusters(state, mode, rng)
    state.iteration = template.iteration + 1
    if timings is not None:
        timings["reduce"] = t1 - t0
        timings["shuffle"] = time.perf_counter() - t1
    return state


class MapPool:
    """Runs map tasks on ``workers`` threads with a barrier at the end of each phase."""

    def __init__(self, workers: int = 1):
        if workers < 1:
            raise UsageError("workers must be >= 1")
        self.workers = workers
        self._pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    def run(self, shards: list, data, sweeps: int) -> list:
        if self._pool is None:
            results = []
            for sh in shards:
                try:
                    results.append(map_sweep(sh, data, sweeps))
                except Exception as e:
                    raise WorkerError(f"map task for supercluster {sh.k} at iteration {sh.iteration} failed: {e}") from e
            return results
        futures = [self._pool.submit(map_sweep, sh, data, sweeps) for sh in shards]
        results = []
        for sh, fut in zip(shards, futures):
            try:
                results.append(fut.result())
            except Exception as e:
                for f in futures:
                    f.cancel()
                raise WorkerError(f"map task for supercluster {sh.k} at iteration {sh.iteration} failed: {e}") from e
        return results

    def close(self):
        if self._pool is not None:
            self._pool.shutdown(wait=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def prior_chain_experiment(n_rows: int, n_superclusters: int, iterations: int, sweeps_per_shuffle: int,
                           alpha: float, seed: int = 0, burn_in: float = 0.1) -> dict:
    """Likelihood-free chain over the two-stage CRP; reports the ESS of the cluster count.

    One iteration is one local sweep of every shard; clusters are reshuffled
    after every ``sweeps_per_shuffle`` iterations. The chain starts from an
    exact prior draw, and the first ``burn_in`` fraction is dropped anyway.
    """
    if iterations < 10 or sweeps_per_shuffle < 1:
        raise UsageError("need iterations >= 10 and sweeps_per_shuffle >= 1")
    spec = ConcentrationSpec.uniform(alpha, n_superclusters)
    x = np.zeros((n_rows, 0), np.uint8)
    beta = np.zeros(0)
    log_alpha_mu = math.log(alpha / n_superclusters)
    mu = np.asarray(spec.mu)

    pa = two_stage_crp_sample(n_rows, spec, streams.stream(seed, streams.INIT))
    z = pa.z.copy()
    sc = np.array([pa.s[j] for j in range(len(pa.s))], dtype=np.int64)
    trace = np.empty(iterations, dtype=np.int64)
    for t in range(iterations):
        row_sc = sc[z]
        new_z = np.empty_like(z)
        new_sc = []
        offset = 0
        for k in range(n_superclusters):
            rows = np.flatnonzero(row_sc == k).astype(np.int64)
            m = len(rows)
            if m == 0:
                continue
            uniq, lab = np.unique(z[rows], return_inverse=True)
            c = len(uniq)
            cap = max(m, c) + 1
            sizes = np.zeros(cap, np.int64)
            sizes[:c] = np.bincount(lab, minlength=c)
            origin = np.full(cap, -1, np.int64)
            origin[:c] = np.arange(c)
            lab = lab.astype(np.int64)
            rng = streams.stream(seed, streams.MAP, t, k)
            sweep_shard(x, rows, lab, sizes, np.zeros((cap, 0), np.int64), origin, c, log_alpha_mu, beta,
                        rng.permutation(m)[None, :].astype(np.int64), rng.random((1, m)))
            used, newlab = np.unique(lab, return_inverse=True)
            new_z[rows] = offset + newlab
            new_sc.extend([k] * len(used))
            offset += len(used)
        z = new_z
        sc = np.array(new_sc, dtype=np.int64)
        if (t + 1) % sweeps_per_shuffle == 0:
            sc = streams.stream(seed, streams.REDUCE, t).choice(n_superclusters, size=len(sc), p=mu)
        trace[t] = offset
    kept = trace[int(burn_in * iterations):].astype(float)
    e = ess(kept)
    return {
        "n_rows": n_rows,
        "n_superclusters": n_superclusters,
        "alpha": alpha,
        "sweeps_per_shuffle": sweeps_per_shuffle,
        "iterations": iterations,
        "ess": e,
        "ess_per_iteration": e / len(kept),
        "mean_clusters": float(kept.mean()),
        "expected_clusters": expected_clusters(n_rows, alpha),
        "trace": trace,
    }
