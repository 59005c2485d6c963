import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advbias.core import AgeBin, Cohort, GroupKey, Sex, enumerate_groups, make_splits
from advbias.poison import (
    EmptyTargetWarning,
    InvalidRateError,
    PoisonManifest,
    eligible_mask,
    flip_count,
    inject_underdiagnosis,
    rate_grid,
)

FEMALE = GroupKey(sex=Sex.FEMALE)


def _cohort(n, seed=0, p=0.5):
    rng = np.random.default_rng(seed)
    return Cohort(np.array([f"p{i}" for i in range(n)]), rng.normal(size=(n, 2)), rng.random(n) < p,
                  rng.choice(["M", "F"], n), rng.uniform(0, 95, n))


def _ten_eligible():
    # 10 female positives in train, plus distractors
    n = 30
    sex = np.array(["F"] * 10 + ["M"] * 10 + ["F"] * 10)
    labels = np.array([1] * 20 + [0] * 10)
    c = Cohort(np.arange(n).astype(str), np.zeros((n, 2)), labels, sex, np.full(n, 30.0))
    plan = make_splits(c, 1, (1.0, 0.0, 0.0))
    return c, plan


def test_rate_grid():
    g = rate_grid()
    assert g == [0, 0.05, 0.1, 0.25, 0.5, 0.75, 1]
    assert len(g) == 7 and g[0] == 0 and g == sorted(g)


@pytest.mark.parametrize("rate, eligible, expected", [(0.5, 10, 5), (0.25, 10, 3), (0.05, 10, 1), (0.05, 9, 0),
                                                      (0.15, 10, 2), (1.0, 7, 7), (0.0, 100, 0), (0.1, 5, 1)])
def test_flip_count_half_up(rate, eligible, expected):
    assert flip_count(rate, eligible) == expected


def test_rate_zero_is_identity():
    c, plan = _ten_eligible()
    labels, m = inject_underdiagnosis(c, plan, 0, FEMALE, 0.0, seed=1)
    assert np.array_equal(labels, c.labels) and m.n_flipped == 0


def test_rate_one_flips_all():
    c, plan = _ten_eligible()
    labels, m = inject_underdiagnosis(c, plan, 0, FEMALE, 1.0, seed=1)
    assert m.n_flipped == 10 and m.eligible_count == 10
    assert labels[:10].sum() == 0 and np.array_equal(labels[10:], c.labels[10:])


def test_half_rate_manifest_matches_predicate():
    c, plan = _ten_eligible()
    labels, m = inject_underdiagnosis(c, plan, 0, FEMALE, 0.5, seed=2)
    elig = eligible_mask(c, plan, 0, FEMALE)
    assert m.n_flipped == 5
    assert all(elig[i] for i in m.flipped_indices)
    assert list(m.flipped_indices) == sorted(m.flipped_indices)
    changed = np.flatnonzero(labels != c.labels)
    assert changed.tolist() == list(m.flipped_indices)
    assert PoisonManifest.from_dict(m.to_dict()) == m


def test_errors_and_warning():
    c, plan = _ten_eligible()
    for bad in (-0.1, 1.1):
        with pytest.raises(InvalidRateError):
            inject_underdiagnosis(c, plan, 0, FEMALE, bad, seed=0)
    with pytest.warns(EmptyTargetWarning):
        labels, m = inject_underdiagnosis(c, plan, 0, GroupKey(age_bin=AgeBin.B80_PLUS), 0.5, seed=0)
    assert m.n_flipped == 0 and m.eligible_count == 0
    assert np.array_equal(labels, c.labels)


def test_same_seed_same_flips():
    c = _cohort(400)
    plan = make_splits(c, 3, seed=1)
    a = inject_underdiagnosis(c, plan, 1, FEMALE, 0.5, seed=9)[1]
    b = inject_underdiagnosis(c, plan, 1, FEMALE, 0.5, seed=9)[1]
    assert a == b


@settings(max_examples=60, deadline=None)
@given(st.integers(20, 300), st.integers(0, 10_000), st.sampled_from(enumerate_groups()),
       st.sampled_from(rate_grid() + [0.3, 0.15]), st.integers(0, 2))
def test_flip_contract_random_cohorts(n, seed, target, rate, fold):
    c = _cohort(n, seed)
    plan = make_splits(c, 3, seed=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyTargetWarning)
        labels, m = inject_underdiagnosis(c, plan, fold, target, rate, seed)
    elig = eligible_mask(c, plan, fold, target)
    assert m.n_flipped == flip_count(rate, int(elig.sum()))
    flipped = np.zeros(n, dtype=bool)
    flipped[list(m.flipped_indices)] = True
    assert not (flipped & ~elig).any()
    assert (labels[flipped] == 0).all()
    assert np.array_equal(labels[~flipped], c.labels[~flipped])
    test = plan.assignments[fold] == 2
    assert np.array_equal(labels[test], c.labels[test])
