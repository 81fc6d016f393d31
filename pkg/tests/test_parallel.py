import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import chisquare

from dpmshard.chain import calibration_rows, initialize, run_parallel
from dpmshard.config import CalibrationSpec, RunConfig
from dpmshard.ess import ess
from dpmshard.errors import ConfigError, IntegrityError, UsageError, WorkerError
from dpmshard.hyper import AlphaPrior, sample_alpha, sample_beta_griddy
from dpmshard.model import BinaryDataset
from dpmshard.parallel import (MapPool, map_sweep, merge_shards, prior_chain_experiment, reduce_step,
                               sample_supercluster_assignments, shard_state, shuffle_clusters, supercluster_probs,
                               update_hyperparameters)
from dpmshard.prior import (ConcentrationSpec, PartitionAssignment, canonical_partition, enumerate_partitions,
                            expected_clusters, joint_log_prior, partition_labels, two_stage_crp_sample)
from dpmshard.state import check_state, state_from_assignment

from oracles import frequencies, partition_posterior, total_variation


def random_state(seed, n=30, d=3, k=3, alpha=1.5):
    rng = np.random.default_rng(seed)
    bits = rng.integers(0, 2, size=(n, d)).astype(np.uint8)
    spec = ConcentrationSpec.uniform(alpha, k)
    pa = two_stage_crp_sample(n, spec, rng)
    return state_from_assignment(bits, pa, spec, rng.uniform(0.2, 3.0, size=d)), BinaryDataset(bits)


def same_state(a, b):
    assert np.array_equal(a.z, b.z)
    assert a.s == b.s
    assert set(a.clusters) == set(b.clusters)
    for j in a.clusters:
        assert a.clusters[j].size == b.clusters[j].size
        assert a.clusters[j].members == b.clusters[j].members
        assert np.array_equal(a.clusters[j].one_counts, b.clusters[j].one_counts)
    assert a.next_cluster_id == b.next_cluster_id


def test_single_supercluster_shard_is_whole_state():
    state, _ = random_state(0, k=1)
    (shard,) = shard_state(state)
    assert shard.n_rows == state.n_rows
    assert sorted(shard.cluster_ids.tolist()) == sorted(state.clusters)
    assert shard.alpha_mu == pytest.approx(state.alpha)


@given(st.integers(0, 2**31), st.integers(1, 6), st.integers(0, 40))
def test_merge_inverts_shard(seed, k, n):
    state, _ = random_state(seed, n=n, k=k)
    shards = shard_state(state)
    for sh in shards:
        sh.validate()
    merged, report = merge_shards(shards, state)
    same_state(merged, state)
    assert report.clusters_per_shard == state.clusters_per_supercluster().tolist()
    assert report.rows_per_shard == state.rows_per_supercluster().tolist()
    assert sum(report.rows_per_shard) == n


def test_local_clusters_view_matches_registry():
    state, _ = random_state(3, k=2)
    for sh in shard_state(state):
        for j, c in sh.local_clusters.items():
            assert c.members == state.clusters[j].members
            assert state.s[j] == sh.k


def test_merge_detects_overlap():
    state, _ = random_state(1, k=2)
    a, b = shard_state(state)
    b.row_ids = b.row_ids.copy()
    b.row_ids[0] = a.row_ids[0]
    with pytest.raises(IntegrityError):
        merge_shards([a, b], state)


def test_merge_detects_missing_rows():
    state, _ = random_state(2, k=2)
    with pytest.raises(IntegrityError):
        merge_shards(shard_state(state)[:1], state)


def test_empty_shard_is_unchanged():
    state, data = random_state(4, n=3, k=8)
    empty = [sh for sh in shard_state(state) if sh.n_rows == 0][0]
    assert map_sweep(empty, data) is empty


def test_identical_rows_collapse_with_tiny_concentration():
    bits = np.ones((12, 4), np.uint8)
    spec = ConcentrationSpec(1e-9, (1.0,))
    state = state_from_assignment(bits, PartitionAssignment(np.arange(12), {j: 0 for j in range(12)}), spec,
                                  np.ones(4))
    (sh,) = shard_state(state, seed=3)
    out = map_sweep(sh, BinaryDataset(bits), sweeps=40)
    assert out.n_clusters == 1


def test_map_sweep_rejects_bad_input():
    state, data = random_state(5, k=1)
    (sh,) = shard_state(state)
    with pytest.raises(UsageError):
        map_sweep(sh, data, sweeps=0)
    sh.alpha_mu = 0.0
    with pytest.raises(UsageError):
        map_sweep(sh, data)


def test_derived_probs_examples():
    assert np.allclose(supercluster_probs(ConcentrationSpec.uniform(1.0, 4), "derived"), [0.25] * 4)
    assert np.allclose(supercluster_probs(ConcentrationSpec(1.0, (0.7, 0.3)), "derived"), [0.7, 0.3])


def test_eq7_literal_hand_value():
    probs = supercluster_probs(ConcentrationSpec(2.0, (0.5, 0.5)), "eq7-literal", [3, 0])
    assert np.allclose(probs, [0.8, 0.2])


def test_eq7_literal_sampler_uses_all_clusters():
    spec = ConcentrationSpec(2.0, (0.5, 0.5))
    rng = np.random.default_rng(9)
    m = 20_000
    hits = sum(sample_supercluster_assignments([0], spec, "eq7-literal", rng, {0: 1, 1: 0, 2: 0, 3: 0})[0] == 0
               for _ in range(m))
    assert hits / m == pytest.approx(0.8, abs=4 * math.sqrt(0.16 / m))


def test_derived_shuffle_frequencies():
    spec = ConcentrationSpec(1.0, (0.7, 0.3))
    out = sample_supercluster_assignments(range(40_000), spec, "derived", np.random.default_rng(2))
    assert np.mean([v == 0 for v in out.values()]) == pytest.approx(0.7, abs=0.01)


def test_unknown_shuffle_mode():
    with pytest.raises(UsageError):
        sample_supercluster_assignments([0], ConcentrationSpec.uniform(1.0, 2), "other", np.random.default_rng())


@pytest.mark.parametrize("mu", [(0.5, 0.5), (0.8, 0.2)])
def test_derived_shuffle_is_exact_conditional_of_joint_prior(mu):
    # the conditional of s given z, from the joint prior, must be the product of mu
    spec = ConcentrationSpec(1.7, mu)
    for n in range(1, 5):
        for p in enumerate_partitions(n):
            z = partition_labels(p)
            labelings = list(np.ndindex(*([2] * len(p))))
            logw = np.array([joint_log_prior(PartitionAssignment(z, dict(enumerate(s))), spec) for s in labelings])
            cond = np.exp(logw - logw.max())
            cond /= cond.sum()
            kernel = np.array([np.prod([mu[k] for k in s]) for s in labelings])
            assert np.allclose(cond, kernel, atol=1e-12)


@pytest.mark.parametrize("k", [1, 3])
def test_map_and_shuffle_target_exact_partition_posterior(k):
    bits = np.array([[1, 1], [1, 0], [0, 0], [1, 1]], np.uint8)
    alpha, beta = 0.8, np.array([0.5, 2.0])
    exact = partition_posterior(bits, alpha, beta)
    data = BinaryDataset(bits)
    spec = ConcentrationSpec.uniform(alpha, k)
    state = state_from_assignment(bits, PartitionAssignment(np.arange(4), {j: j % k for j in range(4)}), spec, beta)
    rng = np.random.default_rng(17)
    seen = []
    for t in range(12_000):
        mapped = [map_sweep(sh, data) for sh in shard_state(state, seed=5)]
        state, _ = merge_shards(mapped, state)
        state = shuffle_clusters(state, "derived", rng)
        state.iteration = t + 1
        seen.append(canonical_partition(state.z))
    assert total_variation(frequencies(seen[500:]), exact) < 0.03


@given(st.integers(0, 2**31), st.integers(1, 5), st.sampled_from(["derived", "eq7-literal"]))
def test_reduce_restores_invariants(seed, k, mode):
    state, data = random_state(seed, n=25, k=k)
    mapped = [map_sweep(sh, data, 2) for sh in shard_state(state, seed)]
    timings = {}
    out = reduce_step(mapped, state, AlphaPrior(), np.geomspace(0.1, 10, 7), np.random.default_rng(seed), mode,
                      timings=timings)
    check_state(out, data)
    assert out.iteration == state.iteration + 1
    assert out.n_clusters == int(out.clusters_per_supercluster().sum())
    assert timings["reduce"] >= 0 and timings["shuffle"] >= 0


def test_single_supercluster_reduce_matches_serial_hyperparameter_step():
    state, data = random_state(8, k=1)
    grid = np.geomspace(0.1, 10, 9)
    _, report = merge_shards(shard_state(state), state)
    a = update_hyperparameters(state.copy(), report, AlphaPrior(), grid, np.random.default_rng(4))
    rng = np.random.default_rng(4)
    alpha = sample_alpha(state.n_clusters, state.n_rows, AlphaPrior(), state.alpha, rng)
    beta = sample_beta_griddy(state.with_alpha(alpha), data, grid, rng)
    assert a.alpha == alpha
    assert np.array_equal(a.beta, beta)


def test_alpha_update_depends_only_on_cluster_total():
    s1, _ = random_state(10, n=30, k=3)
    s2, _ = random_state(11, n=30, k=3)
    # force equal totals by reusing s1's cluster count in the report
    grid = np.geomspace(0.1, 10, 5)
    _, r1 = merge_shards(shard_state(s1), s1)
    _, r2 = merge_shards(shard_state(s2), s2)
    r2.clusters_per_shard = list(reversed(r1.clusters_per_shard))
    a1 = update_hyperparameters(s1.copy(), r1, AlphaPrior(), grid, np.random.default_rng(1)).alpha
    a2 = update_hyperparameters(s2.with_alpha(s1.alpha), r2, AlphaPrior(), grid, np.random.default_rng(1)).alpha
    assert a1 == a2


def test_pool_wraps_worker_failures():
    state, data = random_state(12, k=2)
    shards = shard_state(state)
    shards[1].alpha_mu = -1.0
    for workers in (1, 2):
        with MapPool(workers) as pool:
            with pytest.raises(WorkerError, match="supercluster 1"):
                pool.run(shards, data, 1)
    with pytest.raises(UsageError):
        MapPool(0)


def test_parallel_traces_do_not_depend_on_workers(small_data):
    data, _ = small_data
    cfg = RunConfig(seed=3, iterations=5, superclusters=8, calibration=CalibrationSpec(iterations=10))
    one = [r.trace_dict() for r in run_parallel(cfg.replace(workers=1), data)]
    four = [r.trace_dict() for r in run_parallel(cfg.replace(workers=4), data)]
    assert one == four
    assert len(one) == 6


def test_parallel_timings_are_recorded(small_data):
    data, _ = small_data
    cfg = RunConfig(seed=3, iterations=2, superclusters=2, calibration=CalibrationSpec(iterations=5))
    recs = run_parallel(cfg, data)
    assert all(v >= 0 for r in recs for v in r.timings.values())
    assert set(recs[-1].timings) == {"map", "reduce", "shuffle"}


def test_initialize_scatters_rows_uniformly():
    rng = np.random.default_rng(0)
    data = BinaryDataset(rng.integers(0, 2, size=(4000, 3)).astype(np.uint8))
    cfg = RunConfig(seed=1, superclusters=8, calibration=CalibrationSpec(iterations=5, min_rows=100))
    state = initialize(cfg, data)
    check_state(state, data)
    assert chisquare(state.rows_per_supercluster()).pvalue > 1e-3


def test_initialize_with_full_calibration_single_supercluster(small_data):
    data, _ = small_data
    train = data.train()
    cfg = RunConfig(seed=1, superclusters=1, calibration=CalibrationSpec(fraction=1.0, iterations=5))
    assert calibration_rows(train.n_rows, cfg) == train.n_rows
    state = initialize(cfg, train)
    check_state(state, train)
    assert state.n_superclusters == 1


def test_initialize_rejects_empty_calibration():
    data = BinaryDataset(np.ones((10, 2), np.uint8))
    cfg = RunConfig(calibration=CalibrationSpec(fraction=0.0, min_rows=0))
    with pytest.raises(ConfigError):
        initialize(cfg, data)


def test_prior_chain_mean_matches_crp_expectation():
    r = prior_chain_experiment(60, 4, 6000, 1, 1.5, seed=2)
    kept = r["trace"][600:].astype(float)
    se = kept.std() / math.sqrt(ess(kept))
    assert r["mean_clusters"] == pytest.approx(expected_clusters(60, 1.5), abs=4 * se)
    assert r["expected_clusters"] == pytest.approx(expected_clusters(60, 1.5))


def test_prior_chain_rejects_bad_arguments():
    with pytest.raises(UsageError):
        prior_chain_experiment(10, 2, 5, 1, 1.0)
    with pytest.raises(UsageError):
        prior_chain_experiment(10, 2, 100, 0, 1.0)
