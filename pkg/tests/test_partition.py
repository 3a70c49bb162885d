from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from feddisco.distributions import Metric, discrepancy, from_counts, uniform_target
from feddisco.partition import (
    LabeledDataset,
    PartitionPlan,
    biased_partition_niid2,
    dirichlet_partition,
    exponential_class_counts,
    niid2_categories,
    num_biased_clients,
    synth_gaussian_mixture,
)


def _assert_structural(plan: PartitionPlan, n: int) -> None:
    seen = np.concatenate(plan.assignments)
    assert np.unique(seen).size == seen.size
    assert seen.min() >= 0 and seen.max() < n
    assert all(a.size > 0 for a in plan.assignments)


def test_synth_counts():
    ds = synth_gaussian_mixture(2, 2, [100, 100], 4.0, seed=7)
    assert len(ds) == 200
    assert ds.class_counts().tolist() == [100, 100]
    assert ds.num_features == 2


def test_synth_deterministic():
    a = synth_gaussian_mixture(2, 2, [100, 100], 4.0, seed=7)
    b = synth_gaussian_mixture(2, 2, [100, 100], 4.0, seed=7)
    assert a.features.tobytes() == b.features.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()


def test_synth_empty_class_allowed():
    ds = synth_gaussian_mixture(3, 2, [10, 0, 10], 4.0, seed=1)
    assert ds.class_counts().tolist() == [10, 0, 10]


def test_synth_needs_two_non_empty_classes():
    with pytest.raises(ValueError):
        synth_gaussian_mixture(3, 2, [10, 0, 0], 4.0, seed=1)


@pytest.mark.parametrize("F", [2, 12])
def test_synth_class_means_separated(F):
    C, sep = 4, 5.0
    ds = synth_gaussian_mixture(C, F, [4000] * C, sep, seed=3)
    means = np.stack([ds.features[ds.labels == c].mean(axis=0) for c in range(C)])
    gaps = [np.linalg.norm(means[i] - means[j]) for i in range(C) for j in range(i + 1, C)]
    # equidistant when F >= C; along a line otherwise, so neighbours are sep apart
    assert min(gaps) == pytest.approx(sep, abs=0.15)


def test_labeled_dataset_validation():
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((3, 2)), np.array([0, 1]), 2)
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((2, 2)), np.array([0, 2]), 2)


def test_exponential_counts_large_example():
    counts = exponential_class_counts(5000, 20, 10)
    assert counts[0] == 5000 and counts[-1] == 250


def test_exponential_counts_balanced():
    assert exponential_class_counts(5000, 1, 10).tolist() == [5000] * 10


def test_exponential_counts_small_example():
    assert exponential_class_counts(100, 4, 3).tolist() == [100, 50, 25]


def test_exponential_counts_rejects_rho_below_one():
    with pytest.raises(ValueError):
        exponential_class_counts(100, 0.5, 3)


def test_dirichlet_concentrated_splits_evenly():
    labels = np.zeros(1000, dtype=np.int64)
    for seed in range(100):
        plan = dirichlet_partition(labels, 2, 1e6, seed)
        assert all(abs(s - 500) <= 5 for s in plan.sizes())


def test_dirichlet_deterministic():
    labels = np.repeat(np.arange(4), 50)
    a = dirichlet_partition(labels, 2, 0.5, seed=11)
    b = dirichlet_partition(labels, 2, 0.5, seed=11)
    assert a.to_json() == b.to_json()


def test_dirichlet_structural_over_seeds():
    labels = np.repeat(np.arange(10), 30)
    for seed in range(10):
        plan = dirichlet_partition(labels, 7, 0.3, seed)
        _assert_structural(plan, labels.size)
        for dist in plan.client_distributions(labels, 10):
            assert abs(dist.probs.sum() - 1) < 1e-9


def test_dirichlet_rejects_bad_beta():
    with pytest.raises(ValueError):
        dirichlet_partition(np.array([0, 1, 0, 1]), 2, 0.0, seed=0)


def test_dirichlet_marginal_share_is_unbiased():
    # one (client, category) share has sd ~0.21 at beta=0.5, K=5; over 2000
    # seeds the mean has sd ~0.005, so 0.02 is a ~4 sigma band
    K, C = 5, 4
    labels = np.repeat(np.arange(C), 200)
    shares = np.zeros((K, C))
    seeds = range(2000)
    for seed in seeds:
        counts = dirichlet_partition(labels, K, 0.5, seed).client_counts(labels, C)
        shares += counts / counts.sum(axis=0)
    shares /= len(seeds)
    assert np.all(np.abs(shares - 1 / K) <= 0.02)


def test_niid2_six_clients():
    labels = np.repeat(np.arange(10), 60)
    plan = biased_partition_niid2(labels, 6, 5 / 6, seed=0)
    counts = plan.client_counts(labels, 10)
    held = (counts > 0).sum(axis=1)
    assert held.tolist() == [2, 2, 2, 2, 2, 10]
    _assert_structural(plan, labels.size)


def test_niid2_round_robin_mapping():
    cats = niid2_categories(6, 5 / 6, 10)
    assert cats[:5] == [[0, 1], [2, 3], [4, 5], [6, 7], [8, 9]]


def test_niid2_sixty_clients():
    assert num_biased_clients(60, 50 / 60) == 50
    labels = np.repeat(np.arange(10), 120)
    plan = biased_partition_niid2(labels, 60, 50 / 60, seed=3)
    held = (plan.client_counts(labels, 10) > 0).sum(axis=1)
    # ceil(10 / 50) = 1 category per biased client, 5 biased clients per category
    assert (held[:50] == 1).all() and (held[50:] == 10).all()


def test_niid2_unbiased_client_sees_every_category():
    labels = np.repeat(np.arange(10), 60)
    plan = biased_partition_niid2(labels, 6, 5 / 6, seed=0)
    dist = from_counts(plan.client_counts(labels, 10)[5], 10)
    assert np.all(dist.probs > 0)


def test_niid2_equal_split_within_category():
    labels = np.repeat(np.arange(10), 60)
    counts = biased_partition_niid2(labels, 6, 5 / 6, seed=0).client_counts(labels, 10)
    # category 0: client 0 and client 5 each get half
    assert counts[0, 0] == counts[5, 0] == 30


def test_niid2_biased_clients_more_discrepant():
    labels = np.repeat(np.arange(10), 100)
    target = uniform_target(10)
    for seed in range(20):
        plan = biased_partition_niid2(labels, 10, 0.5, seed)
        d = np.array([discrepancy(x, target, Metric.KL) for x in plan.client_distributions(labels, 10)])
        nb = plan.params["num_biased"]
        assert d[:nb].min() > d[nb:].max()


def test_niid2_errors():
    labels = np.repeat(np.arange(4), 10)
    with pytest.raises(ValueError):
        biased_partition_niid2(labels, 1, 0.5, seed=0)
    with pytest.raises(ValueError):
        biased_partition_niid2(labels, 4, 1.0, seed=0)


def test_plan_json_round_trip():
    labels = np.repeat(np.arange(3), 20)
    plan = dirichlet_partition(labels, 4, 0.5, seed=2)
    again = PartitionPlan.from_json(plan.to_json())
    assert again.digest() == plan.digest()
    assert all(np.array_equal(a, b) for a, b in zip(plan.assignments, again.assignments))


def test_plan_validate_detects_overlap():
    plan = PartitionPlan((np.array([0, 1]), np.array([1, 2])), "manual")
    with pytest.raises(ValueError):
        plan.validate(3)


@settings(max_examples=60, deadline=None)
@given(
    st.integers(2, 12),
    st.integers(2, 8),
    st.floats(0.05, 10.0),
    st.integers(0, 2**31 - 1),
)
def test_dirichlet_plans_always_valid(K, C, beta, seed):
    labels = np.repeat(np.arange(C), 15)
    plan = dirichlet_partition(labels, K, beta, seed)
    _assert_structural(plan, labels.size)
    plan.validate(labels.size)
    assert plan.num_clients == K


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 20), st.floats(0.05, 0.95), st.integers(0, 2**31 - 1))
def test_niid2_plans_always_valid(K, bf, seed):
    C = 10
    labels = np.repeat(np.arange(C), 40)
    plan = biased_partition_niid2(labels, K, bf, seed)
    _assert_structural(plan, labels.size)
    for dist in plan.client_distributions(labels, C):
        assert abs(dist.probs.sum() - 1) < 1e-9
