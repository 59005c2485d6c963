import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advbias.core import AgeBin, GroupKey, Sex, enumerate_groups
from advbias.metrics import (
    Confusion,
    EvalRecord,
    UndefinedMetricError,
    auroc,
    confusion_at,
    evaluate_scores,
    fnr,
    fold_ci,
    for_rate,
    roc_scan,
    youden_j,
    youden_threshold,
)

scores_and_labels = st.integers(2, 60).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 12).map(lambda k: k / 12), min_size=n, max_size=n),
    st.lists(st.integers(0, 1), min_size=n, max_size=n),
)).filter(lambda t: 0 < sum(t[1]) < len(t[1]))


def test_auroc_examples():
    assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auroc([0.4] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    assert auroc([0.9, 0.8, 0.7, 0.85], [1, 1, 0, 0]) == 0.75
    with pytest.raises(UndefinedMetricError):
        auroc([0.1, 0.2], [1, 1])


@settings(max_examples=100, deadline=None)
@given(scores_and_labels, st.sampled_from([np.exp, np.arctan, lambda s: 3 * s ** 3 + 1]))
def test_auroc_invariant_to_increasing_transforms(sl, f):
    s, y = np.array(sl[0]), np.array(sl[1])
    assert auroc(f(s), y) == pytest.approx(auroc(s, y), abs=1e-12)


def test_youden_examples():
    s, y = [0.8, 0.9, 0.2, 0.3], [1, 1, 0, 0]
    t = youden_threshold(s, y)
    assert t == pytest.approx(0.55) and youden_j(s, y, t) == 1.0
    with pytest.raises(UndefinedMetricError):
        youden_threshold([0.1, 0.2], [0, 0])
    anti_s, anti_y = [0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0]
    t = youden_threshold(anti_s, anti_y)
    assert youden_j(anti_s, anti_y, t) <= 0
    assert youden_threshold(anti_s, anti_y) == t
    # J = 0 at both sentinels: lower FPR wins, so +inf
    assert t == math.inf


@settings(max_examples=150, deadline=None)
@given(scores_and_labels)
def test_youden_matches_scan(sl):
    s, y = np.array(sl[0]), np.array(sl[1])
    t = youden_threshold(s, y)
    u = np.unique(s)
    cands = [math.inf, -math.inf] + list((u[:-1] + u[1:]) / 2)
    best = max(youden_j(s, y, c) for c in cands)
    assert youden_j(s, y, t) == pytest.approx(best, abs=1e-12)
    ts, tpr, fpr = roc_scan(s, y)
    assert len(ts) == u.size + 1


def test_confusion_examples():
    s, y = np.array([0.3, 0.7, 0.5]), np.array([1, 0, 1])
    c = confusion_at(s, y, -math.inf)
    assert c.tn == 0 and c.fn == 0 and c.total == 3
    c = confusion_at(s, y, math.inf)
    assert c.tp == 0 and c.fp == 0
    assert confusion_at([0.6, 0.4], [1, 0], 0.5) == Confusion(tp=1, fp=0, tn=1, fn=0)
    # the boundary counts as positive
    assert confusion_at([0.5], [1], 0.5).tp == 1


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=2, max_size=40, unique=True),
       st.lists(st.integers(0, 1), min_size=40, max_size=40), st.floats(0.01, 0.99))
def test_complement_confusion(scores, labels, t):
    s = np.array(scores)
    y = np.array(labels[: s.size])
    if np.any(s == t) or np.any(1 - s == 1 - t):
        return
    a = confusion_at(s, y, t)
    b = confusion_at(1 - s, 1 - y, 1 - t)
    assert (a.tp, a.fp, a.tn, a.fn) == (b.tn, b.fn, b.tp, b.fp)


@pytest.mark.parametrize("c, want_fnr, want_for", [
    (Confusion(tp=8, fn=2, tn=9), 0.2, 2 / 11), (Confusion(tp=5, fn=0, tn=3), 0.0, 0.0),
    (Confusion(fn=1, tn=9), 1.0, 0.1), (Confusion(), None, None)])
def test_rates(c, want_fnr, want_for):
    assert fnr(c) == want_fnr
    assert for_rate(c) == want_for


@settings(max_examples=200)
@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_rates_bounded(tp, fp, tn, fn_):
    c = Confusion(tp, fp, tn, fn_)
    for v in (fnr(c), for_rate(c)):
        assert v is None or 0 <= v <= 1


def _two_group_set():
    # group F (40-60Y) holds every false negative
    s = np.array([0.9, 0.8, 0.2, 0.1, 0.15, 0.9, 0.85, 0.95, 0.1, 0.05])
    y = np.array([1, 1, 1, 1, 0, 1, 1, 1, 0, 0])
    sex = np.array(["F"] * 5 + ["M"] * 5)
    bins = np.full(10, int(AgeBin.B40_60))
    return s, y, sex, bins


def test_evaluate_shared_threshold_and_concentrated_fn():
    s, y, sex, bins = _two_group_set()
    ev = evaluate_scores(s, y, sex, bins, enumerate_groups(), threshold=0.5, test_set="t")
    rec = {str(r.group): r for r in ev.records}
    assert rec["F"].fnr > rec["All"].fnr > rec["M"].fnr
    assert rec["F"].confusion.fn == 2 and rec["M"].confusion.fn == 0
    assert {r.threshold for r in ev.records} == {0.5}
    # all records for the one bin equal the whole-set record
    assert rec["40-60Y"].confusion == rec["All"].confusion
    assert ev.records[0].group.is_all


def test_evaluate_absent_and_single_class_groups():
    s, y, sex, bins = _two_group_set()
    ev = evaluate_scores(s, y, sex, bins, enumerate_groups())
    assert GroupKey(age_bin=AgeBin.B0_20) in ev.absent
    assert len(ev.records) == 1 + 2 + 1 + 2
    y2 = y.copy()
    y2[sex == "M"] = 1
    ev = evaluate_scores(s, y2, sex, bins, [GroupKey(sex=Sex.MALE)])
    male = ev.records[1]
    assert male.auroc is None and male.fnr == 0.4
    with pytest.raises(UndefinedMetricError):
        evaluate_scores(s, np.ones(10), sex, bins, enumerate_groups())


def test_record_round_trip():
    s, y, sex, bins = _two_group_set()
    ev = evaluate_scores(s, y, sex, bins, enumerate_groups(), target=GroupKey(sex=Sex.FEMALE), rate=0.5,
                         fold=1, test_set="internal", trainer="logistic")
    for r in ev.records:
        assert EvalRecord.from_dict(r.to_dict()) == r


def test_fold_ci_examples():
    assert fold_ci([0.2, 0.2, 0.2]) == (pytest.approx(0.2), 0.0)
    assert fold_ci([0.1, 0.1])[1] == 0.0
    mean, hw = fold_ci([0, 1])
    assert mean == 0.5 and hw == pytest.approx(12.7062 * 0.7071 / 1.4142, abs=1e-3)
    assert hw == pytest.approx(6.353, abs=1e-3)
    assert fold_ci([0.4]) is None
    assert fold_ci([0.4, None, float("nan")]) is None
