import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dpmshard.datagen import GeneratorSpec, GroundTruth, generate, row_log_likelihoods, true_heldout_ll
from dpmshard.errors import ConfigError, UsageError
from dpmshard.model import BinaryDataset


def test_huge_beta_gives_fair_coins():
    data, truth = generate(GeneratorSpec(4000, 5, 1, beta_gen=(1e6,), seed=1))
    assert np.allclose(truth.theta, 0.5, atol=0.01)
    assert np.allclose(data.bits.mean(axis=0), 0.5, atol=0.03)


def test_balanced_sizes_1024_over_128():
    data, truth = generate(GeneratorSpec(1024, 4, 128, seed=0))
    assert np.all(np.bincount(truth.true_z) == 8)
    assert np.array_equal(data.labels, truth.true_z)


@given(st.integers(1, 300), st.integers(1, 40))
def test_sizes_differ_by_at_most_one(n, j):
    if j > n:
        return
    _, truth = generate(GeneratorSpec(n, 2, j, seed=0, heldout_fraction=0.0))
    sizes = np.bincount(truth.true_z, minlength=j)
    assert sizes.max() - sizes.min() <= 1


def test_column_means_are_half_across_seeds():
    means = [generate(GeneratorSpec(200, 3, 4, seed=s))[0].bits.mean(axis=0) for s in range(300)]
    assert np.allclose(np.mean(means, axis=0), 0.5, atol=0.03)


def test_coins_stay_inside_open_interval():
    _, truth = generate(GeneratorSpec(500, 64, 50, beta_gen=(0.001,), seed=2))
    assert np.all(truth.theta > 0) and np.all(truth.theta < 1)


def test_same_spec_same_output():
    a, ta = generate(GeneratorSpec(300, 7, 5, seed=9))
    b, tb = generate(GeneratorSpec(300, 7, 5, seed=9))
    assert a.bits.tobytes() == b.bits.tobytes()
    assert np.array_equal(ta.theta, tb.theta)
    assert ta.heldout_ll_per_row == tb.heldout_ll_per_row


def test_heldout_split_is_trailing_and_stratified():
    data, _ = generate(GeneratorSpec(400, 3, 10, seed=1))
    test = data.test()
    assert test.n_rows == 20
    assert test.row_ids.tolist() == list(range(380, 400))
    assert len(set(test.labels.tolist())) == 10


def test_spec_validation():
    with pytest.raises(ConfigError):
        GeneratorSpec(5, 2, 8)
    with pytest.raises(ConfigError):
        GeneratorSpec(10, 0, 2)
    with pytest.raises(ConfigError):
        GeneratorSpec(10, 2, 2, beta_gen=(1.0, -1.0))
    with pytest.raises(ConfigError):
        GeneratorSpec(10, 2, 2, heldout_fraction=1.0)
    assert GeneratorSpec(10, 3, 2).beta_gen == (0.1, 0.1, 0.1)


def test_fair_single_cluster_heldout_ll():
    truth = GroundTruth(np.zeros(4, int), np.full((1, 6), 0.5), math.nan)
    test = BinaryDataset(np.random.default_rng(0).integers(0, 2, size=(9, 6)).astype(np.uint8))
    assert true_heldout_ll(truth, test) == pytest.approx(-6 * math.log(2))


def test_point_mass_coins_give_log_cluster_count():
    eps = 1e-12
    theta = np.array([[eps, 1 - eps, eps], [1 - eps, 1 - eps, 1 - eps], [eps, eps, eps]])
    truth = GroundTruth(np.arange(3), theta, math.nan)
    test = BinaryDataset(np.array([[0, 1, 0], [1, 1, 1], [0, 0, 0]], np.uint8))
    assert true_heldout_ll(truth, test) == pytest.approx(-math.log(3), abs=1e-9)


def test_brute_force_mixture_density():
    theta = np.array([[0.2, 0.7, 0.9], [0.6, 0.1, 0.5]])
    rows = np.array([[1, 0, 1], [0, 0, 0], [1, 1, 1], [0, 1, 0]], np.uint8)
    direct = []
    for x in rows:
        total = 0.0
        for t in theta:
            p = 1.0
            for d in range(3):
                p *= t[d] if x[d] else 1 - t[d]
            total += 0.5 * p
        direct.append(math.log(total))
    assert np.allclose(row_log_likelihoods(theta, rows), direct, atol=1e-12)
    truth = GroundTruth(np.arange(2), theta, math.nan)
    assert true_heldout_ll(truth, BinaryDataset(rows)) == pytest.approx(np.mean(direct))


def test_heldout_ll_errors():
    truth = GroundTruth(np.arange(2), np.full((2, 3), 0.5), math.nan)
    with pytest.raises(UsageError):
        true_heldout_ll(truth, BinaryDataset(np.zeros((2, 4), np.uint8)))
    with pytest.raises(UsageError):
        true_heldout_ll(truth, BinaryDataset(np.zeros((0, 3), np.uint8)))
