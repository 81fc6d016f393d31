import itertools
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import chisquare

from dpmshard.errors import UsageError
from dpmshard.prior import (ConcentrationSpec, PartitionAssignment, canonical_partition, crp_sample,
                            enumerate_partitions, eppf_exact, expected_clusters, format_partition,
                            joint_log_prior, local_table_logprobs, parse_partition, partition_labels,
                            supercluster_choice_logprobs, two_stage_crp_sample)

FIXTURES = Path(__file__).parent / "fixtures"


def empirical(draws):
    counts = {}
    for z in draws:
        p = canonical_partition(z)
        counts[p] = counts.get(p, 0) + 1
    total = sum(counts.values())
    return {p: c / total for p, c in counts.items()}


def tv(p, q):
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)


def test_spec_validation():
    with pytest.raises(UsageError):
        ConcentrationSpec(0.0, (1.0,))
    with pytest.raises(UsageError):
        ConcentrationSpec(1.0, (0.5, 0.6))
    assert ConcentrationSpec.uniform(2.0, 4).mu == (0.25,) * 4


def test_supercluster_choice_first_customer():
    lp = supercluster_choice_logprobs(ConcentrationSpec(1.0, (0.5, 0.5)), [0, 0], 1)
    assert np.allclose(lp, np.log([0.5, 0.5]))


def test_supercluster_choice_hand_value():
    lp = supercluster_choice_logprobs(ConcentrationSpec(1.0, (0.5, 0.5)), [3, 0], 4)
    assert np.allclose(np.exp(lp), [7 / 8, 1 / 8])


def test_supercluster_choice_large_alpha_approaches_mu():
    lp = supercluster_choice_logprobs(ConcentrationSpec(1e9, (0.7, 0.3)), [5, 1], 7)
    assert np.allclose(np.exp(lp), [0.7, 0.3], atol=1e-7)


def test_supercluster_choice_inconsistent_counts():
    with pytest.raises(UsageError):
        supercluster_choice_logprobs(ConcentrationSpec.uniform(1.0, 2), [3, 0], 3)


@given(st.floats(0.01, 100), st.lists(st.integers(0, 20), min_size=1, max_size=6))
def test_supercluster_choice_normalized(alpha, counts):
    spec = ConcentrationSpec.uniform(alpha, len(counts))
    lp = supercluster_choice_logprobs(spec, counts, sum(counts) + 1)
    assert abs(np.exp(lp).sum() - 1.0) < 1e-12


def test_local_table_hand_value():
    assert np.allclose(np.exp(local_table_logprobs(0.5, [2, 1])), [4 / 7, 2 / 7, 1 / 7])


def test_local_table_no_tables():
    assert np.allclose(local_table_logprobs(1.0, []), [0.0])
    with pytest.raises(UsageError):
        local_table_logprobs(1.0, [], include_new=False)


@given(st.floats(1e-3, 1e3), st.lists(st.integers(1, 50), max_size=10), st.booleans())
def test_local_table_normalized(alpha_mu, sizes, include_new):
    if not sizes and not include_new:
        return
    lp = local_table_logprobs(alpha_mu, sizes, include_new)
    assert abs(np.exp(lp).sum() - 1.0) < 1e-12
    assert len(lp) == len(sizes) + include_new


def test_two_stage_empty(rng):
    pa = two_stage_crp_sample(0, ConcentrationSpec.uniform(1.0, 3), rng)
    assert len(pa.z) == 0 and pa.s == {}


@given(st.integers(0, 40), st.floats(0.05, 20), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_two_stage_output_is_valid(n, alpha, k, seed):
    pa = two_stage_crp_sample(n, ConcentrationSpec.uniform(alpha, k), np.random.default_rng(seed))
    pa.validate(k)
    assert len(pa.z) == n


def test_two_stage_with_one_supercluster_matches_crp():
    rng = np.random.default_rng(7)
    spec = ConcentrationSpec.uniform(1.0, 1)
    draws = 100_000
    two = empirical(two_stage_crp_sample(6, spec, rng).z for _ in range(draws))
    plain = empirical(crp_sample(6, 1.0, rng) for _ in range(draws))
    # two independent 1e5-draw histograms over 203 cells: TV noise is about 0.021
    assert tv(two, plain) < 0.03


@pytest.mark.parametrize("mu", [(0.8, 0.2), (0.2, 0.3, 0.5)])
def test_two_stage_marginal_fits_eppf_for_nonuniform_mu(mu):
    rng = np.random.default_rng(11)
    spec = ConcentrationSpec(1.5, mu)
    draws = 30_000
    parts = enumerate_partitions(4)
    emp = empirical(two_stage_crp_sample(4, spec, rng).z for _ in range(draws))
    observed = np.array([emp.get(p, 0.0) * draws for p in parts])
    expected = np.array([eppf_exact(p, 1.5) for p in parts]) * draws
    assert chisquare(observed, expected).pvalue > 1e-3


def test_crp_single_row(rng):
    assert crp_sample(1, 3.0, rng).tolist() == [0]


def test_crp_pair_shares_table_with_probability():
    rng = np.random.default_rng(3)
    m = 40_000
    shared = sum(crp_sample(2, 1.0, rng)[1] == 0 for _ in range(m)) / m
    assert shared == pytest.approx(0.5, abs=4 * math.sqrt(0.25 / m))


def test_crp_expected_clusters():
    rng = np.random.default_rng(4)
    counts = [crp_sample(30, 2.0, rng).max() + 1 for _ in range(20_000)]
    mean = expected_clusters(30, 2.0)
    assert mean == pytest.approx(sum(2.0 / (2.0 + i) for i in range(30)))
    assert np.mean(counts) == pytest.approx(mean, abs=4 * np.std(counts) / math.sqrt(len(counts)))


def test_joint_log_prior_examples():
    one = ConcentrationSpec(1.0, (1.0,))
    both = joint_log_prior(PartitionAssignment([0, 0], {0: 0}), one)
    apart = joint_log_prior(PartitionAssignment([0, 1], {0: 0, 1: 0}), one)
    assert both == pytest.approx(math.log(0.5))
    assert apart == pytest.approx(math.log(0.5))
    assert math.exp(both) + math.exp(apart) == pytest.approx(1.0, abs=1e-15)
    for alpha in (0.1, 1.0, 9.0):
        v = joint_log_prior(PartitionAssignment([0], {0: 0}), ConcentrationSpec(alpha, (0.5, 0.5)))
        assert v == pytest.approx(math.log(0.5))


def test_joint_log_prior_missing_supercluster():
    with pytest.raises(UsageError):
        joint_log_prior(PartitionAssignment([0, 1], {0: 0}), ConcentrationSpec.uniform(1.0, 2))


@pytest.mark.parametrize("mu", [(0.5, 0.5), (0.1, 0.3, 0.6)])
def test_joint_prior_minus_mu_term_is_independent_of_s(mu):
    spec = ConcentrationSpec(0.7, mu)
    k = len(mu)
    for p in enumerate_partitions(4):
        z = partition_labels(p)
        vals = []
        for s in itertools.product(range(k), repeat=len(p)):
            j_k = np.bincount(s, minlength=k)
            vals.append(joint_log_prior(PartitionAssignment(z, dict(enumerate(s))), spec)
                        - float(np.sum(j_k * np.log(mu))))
        assert max(vals) - min(vals) < 1e-12


def test_joint_prior_normalizes_over_all_seatings():
    for n in range(1, 5):
        for k in (1, 2, 3):
            spec = ConcentrationSpec(1.3, tuple(np.arange(1, k + 1) / np.arange(1, k + 1).sum()))
            total = 0.0
            for p in enumerate_partitions(n):
                z = partition_labels(p)
                for s in itertools.product(range(k), repeat=len(p)):
                    total += math.exp(joint_log_prior(PartitionAssignment(z, dict(enumerate(s))), spec))
            assert abs(total - 1.0) < 1e-10


def test_eppf_examples():
    for alpha in (0.5, 1.0, 3.0):
        assert eppf_exact(((0, 1),), alpha) == pytest.approx(1 / (1 + alpha))
    assert eppf_exact(((0,), (1,), (2,)), 1.0) == pytest.approx(1 / 6)


def test_eppf_sums_to_one_at_six():
    parts = enumerate_partitions(6)
    assert len(parts) == 203
    for alpha in (0.2, 1.0, 5.0):
        assert sum(eppf_exact(p, alpha) for p in parts) == pytest.approx(1.0, abs=1e-12)


def test_enumeration_guard():
    with pytest.raises(UsageError):
        enumerate_partitions(13)
    with pytest.raises(UsageError):
        eppf_exact(tuple((i,) for i in range(13)), 1.0)


def test_bell_numbers():
    assert [len(enumerate_partitions(n)) for n in range(7)] == [1, 1, 2, 5, 15, 52, 203]
    assert len(set(enumerate_partitions(6))) == 203


def test_enumeration_matches_fixture():
    lines = (FIXTURES / "partitions_n4.txt").read_text().splitlines()
    assert sorted(parse_partition(ln) for ln in lines) == sorted(enumerate_partitions(4))


@given(st.lists(st.integers(0, 4), min_size=1, max_size=9))
def test_partition_text_round_trip(labels):
    p = canonical_partition(labels)
    assert parse_partition(format_partition(p)) == p
    assert canonical_partition(partition_labels(p)) == p
