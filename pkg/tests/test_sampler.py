from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from metric_forge.errors import TooFewClasses
from metric_forge.sampler import PKSampler, epoch_plan, next_batch


def labels_for(n_classes, per_class):
    return np.repeat(np.arange(n_classes), per_class)


def test_batch_size_is_p_times_k():
    plan = next_batch(PKSampler(labels_for(20, 6), 16, 4, seed=0))
    assert len(plan.sample_indices) == 64 and len(set(plan.class_ids)) == 16


def test_forced_composition():
    labels = labels_for(2, 4)
    plan = next_batch(PKSampler(labels, 2, 2, seed=3))
    assert sorted(Counter(labels[plan.sample_indices]).values()) == [2, 2]


def test_small_class_padded_with_every_member():
    labels = np.array([0, 0, 1, 1, 1, 1, 1])
    for seed in range(50):
        for plan in PKSampler(labels, 2, 4, seed).epoch():
            idx = plan.sample_indices[labels[plan.sample_indices] == 0]
            if len(idx):
                assert len(idx) == 4 and set(idx) == {0, 1}


def test_epoch_count_and_coverage():
    labels = labels_for(32, 8)
    plan = epoch_plan(labels, 16, 4, seed=0)
    assert len(plan) == 4
    seen = np.concatenate([b.sample_indices for b in plan])
    assert sorted(seen) == list(range(256))


def test_all_classes_every_batch():
    for b in epoch_plan(labels_for(5, 9), 5, 3, seed=1):
        assert sorted(b.class_ids) == [0, 1, 2, 3, 4]


def test_determinism():
    a = epoch_plan(labels_for(7, 5), 3, 2, seed=11)
    b = epoch_plan(labels_for(7, 5), 3, 2, seed=11)
    assert all(np.array_equal(x.sample_indices, y.sample_indices) for x, y in zip(a, b))
    c = epoch_plan(labels_for(7, 5), 3, 2, seed=12)
    assert any(not np.array_equal(x.sample_indices, y.sample_indices) for x, y in zip(a, c))


def test_too_few_classes():
    with pytest.raises(TooFewClasses):
        PKSampler(labels_for(3, 4), 4, 2)


@given(st.integers(2, 8), st.integers(1, 9), st.integers(1, 4), st.integers(0, 2**31), st.data())
def test_batch_invariants(n_classes, per_class, K, seed, data):
    P = data.draw(st.integers(1, n_classes))
    labels = labels_for(n_classes, per_class)
    for b in epoch_plan(labels, P, K, seed):
        assert len(b.sample_indices) == P * K
        counts = Counter(labels[b.sample_indices])
        assert len(counts) == P and set(counts.values()) == {K}
        assert [int(c) for c in b.class_ids] == sorted(counts, key=list(b.class_ids).index)
        for c in counts:  # no duplicates unless the class is smaller than K
            idx = b.sample_indices[labels[b.sample_indices] == c]
            if per_class >= K:
                assert len(set(idx)) == K
