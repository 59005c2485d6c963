"""Audit mode: the same metrics, nu and tests from externally supplied scores.

Input is a CSV with one row per (sample, model run); see docs/schemas.md.
Rows tagged ``test_set == "val"`` carry the (possibly poisoned)
validation labels of a run and, when present, set that run's threshold;
otherwise each test set gets its own Youden threshold.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..core import GroupKey, age_bin_codes, enumerate_groups
from ..metrics import EvalRecord, UndefinedMetricError, evaluate_scores, youden_threshold
from .report import ResultsBundle

REQUIRED = ("sample_id", "sex", "age_years", "label", "score", "rate", "fold", "test_set")
OPTIONAL = ("target", "trainer")
VAL = "val"


class InvalidAuditError(ValueError):
    pass


@dataclass(frozen=True)
class AuditRow:
    sample_id: str
    sex: str
    age_years: float
    label: int
    score: float
    rate: float
    fold: int
    test_set: str
    target: str = ""
    trainer: str = ""


@dataclass
class AuditInput:
    rows: list[AuditRow]
    rejected: list[tuple[int, str]] = field(default_factory=list)  # (line number, reason)

    @classmethod
    def from_csv(cls, path: str | Path) -> AuditInput:
        rows, rejected = [], []
        with Path(path).open(newline="") as fh:
            reader = csv.DictReader(fh)
            missing = [c for c in REQUIRED if c not in (reader.fieldnames or [])]
            if missing:
                raise InvalidAuditError(f"missing columns {missing}")
            for line, raw in enumerate(reader, start=2):
                try:
                    rows.append(parse_row(raw))
                except ValueError as exc:
                    rejected.append((line, str(exc)))
        return cls(rows, rejected)


def parse_row(raw: dict) -> AuditRow:
    sid = (raw.get("sample_id") or "").strip()
    if not sid:
        raise ValueError("empty sample_id")
    sex = (raw.get("sex") or "").strip()
    if sex not in ("M", "F"):
        raise ValueError(f"sex must be M or F, got {sex!r}")
    age = float(raw["age_years"])
    if not (math.isfinite(age) and age >= 0):
        raise ValueError(f"age_years must be finite and >= 0, got {raw['age_years']!r}")
    label = raw["label"].strip()
    if label not in ("0", "1"):
        raise ValueError(f"label must be 0 or 1, got {label!r}")
    score = float(raw["score"])
    if not 0.0 <= score <= 1.0:
        raise ValueError(f"score must lie in [0, 1], got {raw['score']!r}")
    rate = float(raw["rate"])
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must lie in [0, 1], got {raw['rate']!r}")
    fold = int(raw["fold"])
    test_set = (raw.get("test_set") or "").strip()
    if not test_set:
        raise ValueError("empty test_set")
    target = (raw.get("target") or "").strip()
    if target:
        key = GroupKey.parse(target)
        if key.is_all:
            raise ValueError("target cannot be All")
    return AuditRow(sid, sex, age, int(label), score, rate, fold, test_set, target,
                    (raw.get("trainer") or "").strip())


@dataclass
class AuditResult:
    bundle: ResultsBundle
    rejected: list[tuple[int, str]]


def _arrays(rows):
    s = np.array([r.score for r in rows], dtype=float)
    y = np.array([r.label for r in rows], dtype=int)
    sex = np.array([r.sex for r in rows])
    bins = age_bin_codes([r.age_years for r in rows])
    return s, y, sex, bins


def run_audit(inp: AuditInput) -> AuditResult:
    if not inp.rows:
        raise InvalidAuditError("no valid rows")
    runs = defaultdict(list)  # (target, trainer, rate, fold) -> rows
    for r in inp.rows:
        runs[(r.target, r.trainer, r.rate, r.fold)].append(r)
    rates_by = defaultdict(set)
    for target, trainer, rate, _ in runs:
        rates_by[(target, trainer)].add(rate)
    for (target, trainer), rates in rates_by.items():
        label = f"target={target or '-'}, trainer={trainer or '-'}"
        if 0.0 not in rates:
            raise InvalidAuditError(f"{label}: baseline rate 0 missing")
        if len(rates) < 2:
            raise InvalidAuditError(f"{label}: need at least two rates, got {sorted(rates)}")

    groups = enumerate_groups()
    records: list[EvalRecord] = []
    notices = []
    # taxonomy order of targets, matching the grid's record order
    for (target, trainer, rate, fold), rows in sorted(runs.items(), key=lambda kv: (
            _group_order(kv[0][0]), kv[0][2], kv[0][3], kv[0][1])):
        by_set = defaultdict(list)
        for r in rows:
            by_set[r.test_set].append(r)
        threshold = None
        if VAL in by_set:
            vs, vy, _, _ = _arrays(by_set[VAL])
            try:
                threshold = youden_threshold(vs, vy)
            except UndefinedMetricError:
                notices.append(f"run {target}/{trainer}/{rate!r}/{fold}: val rows single-class, "
                               "using per-test-set thresholds")
        tags = dict(target=GroupKey.parse(target) if target else None, rate=rate, fold=fold, trainer=trainer)
        for ts in sorted(k for k in by_set if k != VAL):
            s, y, sex, bins = _arrays(by_set[ts])
            try:
                ev = evaluate_scores(s, y, sex, bins, groups, threshold, test_set=ts, **tags)
            except UndefinedMetricError as exc:
                notices.append(f"run {target}/{trainer}/{rate!r}/{fold} test set {ts}: {exc}")
                continue
            records += ev.records
    if not records:
        raise InvalidAuditError("no test-set rows to evaluate")
    present = {str(r.group) for r in records}
    notices += [f"group {g} absent from all rows; omitted" for g in map(str, groups) if g not in present]

    targets = sorted({_lab(r.target) for r in records}, key=_group_order)
    bundle = ResultsBundle.from_records(records, trainers=sorted({r.trainer for r in records}),
                                        test_sets=sorted({r.test_set for r in records}), targets=targets,
                                        notices=notices)
    return AuditResult(bundle, list(inp.rejected))


def _lab(t) -> str:
    return "" if t is None else str(t)


def _group_order(label: str) -> tuple:
    order = [str(g) for g in enumerate_groups()]
    return (order.index(label) if label in order else len(order), label)


def write_rejections(path: Path, rejected) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["line", "reason"])
        w.writerows(rejected)


# -- export from a grid ------------------------------------------------------------

EXPORT_COLUMNS = list(REQUIRED) + list(OPTIONAL)


def export_scores(results_dir: str | Path, out_csv: str | Path) -> int:
    """Write every successful cell's val and test scores as audit input; returns the row count."""
    import json

    from .config import ExperimentConfig
    from .grid import Cell, GridContext, grid_cells, load_scores, read_cells

    d = Path(results_dir)
    cfg = ExperimentConfig.from_dict(json.loads((d / "config.json").read_text()))
    ctx = GridContext(cfg)
    done = {k for k, c in read_cells(d).items() if c["status"] == "ok"}
    tests = ctx.test_cohorts()
    n = 0
    with Path(out_csv).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EXPORT_COLUMNS)
        cell: Cell
        for cell in grid_cells(cfg):
            if cell.key not in done:
                continue
            sc = load_scores(d, cell)
            tags = [repr(cell.rate), cell.fold]
            extra = [str(cell.target), cell.trainer.name]
            c = ctx.cohort
            for i, s, y in zip(sc["val_index"], sc["val"], sc["val_labels"]):
                w.writerow([f"{c.patient_ids[i]}#{i}", c.sex[i], repr(float(c.age_years[i])), int(y),
                            repr(float(s)), *tags, VAL, *extra])
                n += 1
            for name, tc in tests.items():
                for i, s in enumerate(sc[name]):
                    w.writerow([f"{tc.patient_ids[i]}#{i}", tc.sex[i], repr(float(tc.age_years[i])),
                                int(tc.labels[i]), repr(float(s)), *tags, name, *extra])
                    n += 1
    return n

