"""AUROC, Youden threshold, confusion-derived rates and fold CIs.

Undefined values (empty denominators, single-class groups) are ``None``
in records and never coerced to zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .core import GroupKey


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class Confusion:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _check(scores, labels):
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-D and equal length")
    return s, y.astype(bool)


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC from average ranks (ties count one half)."""
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both classes")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_scan(scores, labels):
    """Candidate thresholds with their TPR and FPR under ``score >= t``.

    Candidates are +inf, the midpoints between adjacent distinct scores
    (descending), and -inf.
    """
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("threshold selection needs both classes")
    u, inv = np.unique(s, return_inverse=True)
    pos_at = np.bincount(inv, weights=y, minlength=u.size)
    neg_at = np.bincount(inv, weights=~y, minlength=u.size)
    # predicted positive count when the threshold sits just below u[j]
    tp_ge = np.cumsum(pos_at[::-1])[::-1]
    fp_ge = np.cumsum(neg_at[::-1])[::-1]
    mids = (u[:-1] + u[1:]) / 2.0
    # adjacent floats can round the midpoint onto the lower value
    mids = np.where(mids > u[:-1], mids, u[1:])
    thresholds = np.concatenate([[math.inf], mids[::-1], [-math.inf]])
    tp = np.concatenate([[0.0], tp_ge[1:][::-1], [n_pos]])
    fp = np.concatenate([[0.0], fp_ge[1:][::-1], [n_neg]])
    return thresholds, tp / n_pos, fp / n_neg


def youden_threshold(scores, labels) -> float:
    """Threshold maximising TPR - FPR; ties go to lower FPR, then lower threshold."""
    t, tpr, fpr = roc_scan(scores, labels)
    j = tpr - fpr
    order = np.lexsort((t, fpr, -j))
    return float(t[order[0]])


def youden_j(scores, labels, threshold: float) -> float:
    c = confusion_at(scores, labels, threshold)
    return c.tp / (c.tp + c.fn) - c.fp / (c.fp + c.tn)


def confusion_at(scores, labels, threshold: float) -> Confusion:
    s, y = _check(scores, labels)
    pred = s >= threshold
    return Confusion(tp=int((pred & y).sum()), fp=int((pred & ~y).sum()),
                     tn=int((~pred & ~y).sum()), fn=int((~pred & y).sum()))


def fnr(c: Confusion) -> float | None:
    d = c.fn + c.tp
    return c.fn / d if d else None


def for_rate(c: Confusion) -> float | None:
    d = c.fn + c.tn
    return c.fn / d if d else None


@dataclass(frozen=True)
class EvalRecord:
    group: GroupKey
    n: int
    auroc: float | None
    threshold: float
    fnr: float | None
    for_: float | None
    confusion: Confusion
    target: GroupKey | None = None
    rate: float | None = None
    fold: int | None = None
    test_set: str = ""
    trainer: str = ""

    def metric(self, name: str) -> float | None:
        return {"FNR": self.fnr, "FOR": self.for_, "AUROC": self.auroc}[name]

    def to_dict(self) -> dict:
        c = self.confusion
        return {"target": None if self.target is None else str(self.target), "rate": self.rate,
                "fold": self.fold, "trainer": self.trainer, "test_set": self.test_set,
                "group": str(self.group), "n": self.n, "auroc": self.auroc, "threshold": self.threshold,
                "fnr": self.fnr, "for": self.for_, "tp": c.tp, "fp": c.fp, "tn": c.tn, "fn": c.fn}

    @classmethod
    def from_dict(cls, d: dict) -> EvalRecord:
        return cls(GroupKey.parse(d["group"]), d["n"], d["auroc"], d["threshold"], d["fnr"], d["for"],
                   Confusion(d["tp"], d["fp"], d["tn"], d["fn"]),
                   None if d.get("target") is None else GroupKey.parse(d["target"]),
                   d.get("rate"), d.get("fold"), d.get("test_set", ""), d.get("trainer", ""))


RECORD_COLUMNS = ["target", "rate", "fold", "trainer", "test_set", "group", "n", "auroc", "threshold",
                  "fnr", "for", "tp", "fp", "tn", "fn"]


@dataclass
class GroupEvaluation:
    records: list[EvalRecord]
    threshold: float
    absent: list[GroupKey] = field(default_factory=list)


def evaluate_scores(scores, labels, sex, age_bins, groups, threshold: float | None = None,
                    **tags) -> GroupEvaluation:
    """Per-group metrics at one shared threshold.

    The threshold is ``threshold`` when given, otherwise the Youden
    threshold of all the scores. ``groups`` should not include All; the
    All record is always emitted first. Groups with no members are listed
    in ``absent`` instead of producing a record.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(int)
    if s.size == 0:
        raise ValueError("empty evaluation set")
    t = youden_threshold(s, y) if threshold is None else float(threshold)
    sex = np.asarray(sex)
    age_bins = np.asarray(age_bins)
    records, absent = [], []
    for g in [GroupKey.all()] + [g for g in groups if not g.is_all]:
        m = g.mask(sex, age_bins)
        if not m.any():
            absent.append(g)
            continue
        gs, gy = s[m], y[m]
        c = confusion_at(gs, gy, t)
        try:
            a = auroc(gs, gy)
        except UndefinedMetricError:
            a = None
        records.append(EvalRecord(g, int(m.sum()), a, t, fnr(c), for_rate(c), c, **tags))
    return GroupEvaluation(records, t, absent)


def evaluate_groups(model, cohort, groups, threshold: float | None = None, **tags) -> GroupEvaluation:
    scores = model.predict_proba(cohort.features)
    return evaluate_scores(scores, cohort.labels, cohort.sex, cohort.age_bins, groups, threshold, **tags)


def fold_ci(values, confidence: float = 0.95) -> tuple[float, float] | None:
    """Mean and Student-t half-width over the defined values; None if fewer than two."""
    from .stats import t_ppf

    v = np.array([x for x in values if x is not None and not math.isnan(x)], dtype=float)
    if v.size < 2:
        return None
    sd = v.std(ddof=1) if np.ptp(v) > 0 else 0.0  # identical values: exactly zero, not rounding noise
    q = t_ppf(0.5 + confidence / 2, v.size - 1)
    return float(v.mean()), float(q * sd / math.sqrt(v.size))
