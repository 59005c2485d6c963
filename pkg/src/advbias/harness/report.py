"""Assemble EvalRecords into vulnerability tables, curves and test tables.

All CSVs are written with ``repr`` floats and a fixed row order, so two
runs of one config produce identical bytes. Column tables for every file
live in docs/schemas.md.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..core import GroupKey, enumerate_groups
from ..metrics import RECORD_COLUMNS, EvalRecord, fold_ci
from ..stats import benjamini_hochberg, detect_crossovers, independent_t, paired_t
from ..vulnerability import NU_RIDGE, InsufficientDataError, MetricSeries, VulnerabilityReport, build_report, \
    vulnerability_vs_size

METRICS = ("FNR", "FOR", "AUROC")
AUROC_NOTE = "non-conclusive: AUROC is threshold-free and can hide underdiagnosis"
ABSENT_NOTE = "absent: group has no samples in this test set"


class EmptyResultsError(ValueError):
    pass


def _label(x) -> str:
    return "" if x is None else str(x)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _num(s: str, kind=float):
    return None if s == "" else kind(s)


@dataclass
class ResultsBundle:
    """EvalRecords plus the axes needed to lay out reports."""

    records: list[EvalRecord]
    trainers: list[str]
    test_sets: list[str]
    targets: list[str]  # labels; "" when records carry no target
    rates: list[float]
    train_sizes: dict = field(default_factory=dict)
    notices: list[str] = field(default_factory=list)
    nu_ridge: float = NU_RIDGE
    nu_rescale: str = "affine"
    nu_fold_means: bool = False
    equal_var: bool = False

    @classmethod
    def from_records(cls, records, **kw) -> ResultsBundle:
        records = list(records)
        if not records:
            raise EmptyResultsError("no evaluation records")

        def ordered(vals):
            return list(dict.fromkeys(vals))

        kw.setdefault("trainers", ordered(r.trainer for r in records))
        kw.setdefault("test_sets", ordered(r.test_set for r in records))
        kw.setdefault("targets", ordered(_label(r.target) for r in records))
        kw.setdefault("rates", sorted({r.rate for r in records}))
        return cls(records, **kw)

    @classmethod
    def load(cls, results_dir: str | Path) -> ResultsBundle:
        """From a grid directory (cells.jsonl + config.json) or a report directory."""
        d = Path(results_dir)
        if (d / "cells.jsonl").exists() and (d / "config.json").exists():
            return _bundle_from_grid(d)
        if (d / "records.csv").exists() and (d / "bundle.json").exists():
            meta = json.loads((d / "bundle.json").read_text())
            return cls.from_records(read_records_csv(d / "records.csv"), **meta)
        raise FileNotFoundError(f"{d} holds neither grid cells nor a records table")

    def meta(self) -> dict:
        return {"trainers": self.trainers, "test_sets": self.test_sets, "targets": self.targets,
                "rates": self.rates, "train_sizes": self.train_sizes, "notices": self.notices,
                "nu_ridge": self.nu_ridge, "nu_rescale": self.nu_rescale, "nu_fold_means": self.nu_fold_means,
                "equal_var": self.equal_var}


def _bundle_from_grid(d: Path) -> ResultsBundle:
    from ..core import make_splits, stable_seed
    from ..synthgen import generate_cohort
    from .config import ExperimentConfig
    from .grid import group_train_sizes, read_cells

    cfg = ExperimentConfig.from_dict(json.loads((d / "config.json").read_text()))
    cells = read_cells(d)
    ok = [c for c in cells.values() if c["status"] == "ok"]
    notices = [f"cell {c['key']} failed: {c['error'].splitlines()[0] if c['error'] else 'unknown'}"
               for c in cells.values() if c["status"] != "ok"]
    # fixed order regardless of completion order
    order = {(str(t), float(r), k, tr.name): i for i, (t, r, k, tr) in enumerate(
        (t, r, k, tr) for t in cfg.targets for r in cfg.rates for k in range(cfg.fold_count) for tr in cfg.trainers)}
    ok.sort(key=lambda c: order.get((c["target"], float(c["rate"]), int(c["fold"]), c["trainer"]), len(order)))
    records = [EvalRecord.from_dict(r) for c in ok for r in c["records"]]
    absent = defaultdict(set)
    for c in ok:
        for ts, groups in c.get("absent", {}).items():
            absent[ts].update(groups)
    for ts in cfg.test_sets:
        if absent.get(ts):
            notices.append(f"test set {ts}: no samples for {', '.join(sorted(absent[ts]))}")
    cohort = generate_cohort(cfg.cohort)
    plan = make_splits(cohort, cfg.fold_count, cfg.split_proportions, stable_seed(cfg.root_seed, "split"))
    if not records:
        raise EmptyResultsError(f"{d}: no successful cells")
    return ResultsBundle(records, [t.name for t in cfg.trainers], cfg.test_sets, [str(t) for t in cfg.targets],
                         [float(r) for r in cfg.rates], group_train_sizes(cohort, plan), notices, cfg.nu_ridge,
                         cfg.nu_rescale, cfg.nu_fold_means, cfg.equal_var)


def write_records_csv(path: Path, records) -> None:
    _write_csv(path, RECORD_COLUMNS, ([r.to_dict()[c] for c in RECORD_COLUMNS] for r in records))


def read_records_csv(path: Path) -> list[EvalRecord]:
    out = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            d = {"target": row["target"] or None, "rate": _num(row["rate"]), "fold": _num(row["fold"], int),
                 "trainer": row["trainer"], "test_set": row["test_set"], "group": row["group"],
                 "n": int(row["n"]), "auroc": _num(row["auroc"]), "threshold": float(row["threshold"]),
                 "fnr": _num(row["fnr"]), "for": _num(row["for"])}
            d.update({k: int(row[k]) for k in ("tp", "fp", "tn", "fn")})
            out.append(EvalRecord.from_dict(d))
    return out


# -- analysis ----------------------------------------------------------------------

class RecordIndex:
    """records keyed by (trainer, test_set, target, rate, fold, group)."""

    def __init__(self, records):
        self.by = {}
        self.folds = set()
        self.groups = defaultdict(set)  # test set -> groups with records
        for r in records:
            self.by[(r.trainer, r.test_set, _label(r.target), r.rate, r.fold, str(r.group))] = r
            self.folds.add(r.fold)
            self.groups[r.test_set].add(str(r.group))
        self.folds = sorted(self.folds, key=lambda f: (f is None, f if f is not None else 0))

    def value(self, trainer, test_set, target, rate, fold, group, metric):
        r = self.by.get((trainer, test_set, target, rate, fold, group))
        return None if r is None else r.metric(metric)

    def series(self, trainer, test_set, target, group, metric, rates) -> MetricSeries:
        pts = []
        for rate in rates:
            for fold in self.folds:
                g = self.value(trainer, test_set, target, rate, fold, group, metric)
                o = self.value(trainer, test_set, target, rate, fold, "All", metric)
                if (trainer, test_set, target, rate, fold, "All") in self.by:
                    pts.append((rate, -1 if fold is None else fold, g, o))
        return MetricSeries.from_points(pts)

    def fold_values(self, trainer, test_set, target, rate, group, metric) -> dict:
        out = {}
        for fold in self.folds:
            v = self.value(trainer, test_set, target, rate, fold, group, metric)
            if v is not None:
                out[fold] = v
        return out


def observed_groups(bundle: ResultsBundle) -> list[str]:
    """Non-All groups with records in at least one test set, in taxonomy order."""
    seen = {str(r.group) for r in bundle.records}
    return [str(g) for g in enumerate_groups() if str(g) in seen]


def omitted_groups(bundle: ResultsBundle) -> list[str]:
    seen = {str(r.group) for r in bundle.records}
    return [str(g) for g in enumerate_groups() if str(g) not in seen]


def vulnerability_reports(bundle: ResultsBundle, idx: RecordIndex | None = None) -> list[VulnerabilityReport]:
    idx = idx or RecordIndex(bundle.records)
    out = []
    for tr in bundle.trainers:
        for ts in bundle.test_sets:
            for target in bundle.targets:
                for g in observed_groups(bundle):
                    for m in METRICS:
                        tags = dict(target=target, observed_group=g, metric=m, test_set=ts, trainer=tr)
                        if g not in idx.groups[ts]:
                            out.append(VulnerabilityReport(nu=None, note=ABSENT_NOTE, **tags))
                            continue
                        rep = build_report(idx.series(tr, ts, target, g, m, bundle.rates), ridge=bundle.nu_ridge,
                                           rescale=bundle.nu_rescale, use_fold_means=bundle.nu_fold_means, **tags)
                        if m == "AUROC":
                            rep = VulnerabilityReport(**{**rep.to_dict(), "note": "; ".join(
                                x for x in (rep.note, AUROC_NOTE) if x)})
                        out.append(rep)
    return out


REPORT_COLUMNS = ["trainer", "test_set", "target", "observed_group", "metric", "nu", "alpha", "alt_metric_1",
                  "alt_metric_2", "point_count", "converged", "note"]


def _category(label: str) -> str:
    return GroupKey.parse(label).kind


def table_b1(reports) -> list[list]:
    """On-diagonal FNR/FOR nu with most/least flags per (trainer, test set, metric, category)."""
    diag = [r for r in reports if r.on_diagonal and r.metric in ("FNR", "FOR")]
    flags = {}
    cells = defaultdict(list)
    for r in diag:
        if r.nu is not None:
            cells[(r.trainer, r.test_set, r.metric, _category(r.target))].append(r)
    for rs in cells.values():
        if len(rs) < 2:
            continue
        hi = max(rs, key=lambda r: r.nu)
        lo = min(rs, key=lambda r: r.nu)
        flags[id(hi)] = "most"
        flags[id(lo)] = "least"
    return [[r.trainer, _category(r.target), r.target, r.metric, r.test_set, r.nu, flags.get(id(r), ""), r.note]
            for r in diag]


B1_COLUMNS = ["trainer", "category", "group", "metric", "test_set", "nu", "flag", "note"]


def heatmaps(bundle: ResultsBundle, reports) -> dict[str, tuple[list, list]]:
    """{file name: (header, rows)}: targeted x observed nu, per metric/test set/trainer/category."""
    nu = {(r.trainer, r.test_set, r.metric, r.target, r.observed_group): r.nu for r in reports}
    obs = observed_groups(bundle)
    out = {}
    targets = [t for t in bundle.targets if t]
    for tr in bundle.trainers:
        for ts in bundle.test_sets:
            for m in METRICS:
                for cat in ("sex", "age", "intersection"):
                    rows_t = [t for t in targets if _category(t) == cat]
                    cols = [g for g in obs if _category(g) == cat]
                    if not rows_t or not cols:
                        continue
                    rows = [[t] + [nu.get((tr, ts, m, t, g)) for g in cols] for t in rows_t]
                    out[f"heatmap_{m}_{ts}_{tr}_{cat}.csv"] = (["target"] + cols, rows)
    return out


def curves(bundle: ResultsBundle, idx: RecordIndex) -> list[list]:
    groups = ["All"] + observed_groups(bundle)
    rows = []
    for tr in bundle.trainers:
        for ts in bundle.test_sets:
            for target in bundle.targets:
                for m in METRICS:
                    for rate in bundle.rates:
                        for g in groups:
                            vals = list(idx.fold_values(tr, ts, target, rate, g, m).values())
                            if not vals:
                                continue
                            ci = fold_ci(vals)
                            mean = float(np.mean(vals)) if ci is None else ci[0]
                            rows.append([tr, ts, target, m, rate, g, mean, None if ci is None else ci[1], len(vals)])
    return rows


CURVE_COLUMNS = ["trainer", "test_set", "target", "metric", "rate", "group", "mean", "ci_half_width", "n_folds"]


def inter_rate_tests(bundle: ResultsBundle, idx: RecordIndex, q: float = 0.05) -> list[list]:
    """Paired (by fold) t-test of each rate against rate 0, BH within (trainer, test set, target, metric)."""
    families = defaultdict(list)
    groups = ["All"] + observed_groups(bundle)
    base = bundle.rates[0]
    for tr in bundle.trainers:
        for ts in bundle.test_sets:
            for target in bundle.targets:
                for m in METRICS:
                    fam = families[(tr, ts, target, m)]
                    for g in groups:
                        b = idx.fold_values(tr, ts, target, base, g, m)
                        for rate in bundle.rates[1:]:
                            a = idx.fold_values(tr, ts, target, rate, g, m)
                            common = [f for f in b if f in a]
                            if len(common) < 2:
                                continue
                            va = [a[f] for f in common]
                            vb = [b[f] for f in common]
                            res = paired_t(va, vb)
                            fam.append([tr, ts, target, g, m, base, rate, float(np.mean(vb)), float(np.mean(va)),
                                        res.statistic, res.df, res.p_value])
    return _bh_rows(families, q)


INTER_RATE_COLUMNS = ["trainer", "test_set", "target", "group", "metric", "rate_baseline", "rate", "mean_baseline",
                      "mean_rate", "t", "df", "p_value", "bh_reject"]


def inter_group_tests(bundle: ResultsBundle, idx: RecordIndex, q: float = 0.05) -> list[list]:
    """Welch (or pooled) t-test of group vs overall fold values at each rate, BH within (trainer, test set, target, metric)."""
    families = defaultdict(list)
    for tr in bundle.trainers:
        for ts in bundle.test_sets:
            for target in bundle.targets:
                for m in METRICS:
                    fam = families[(tr, ts, target, m)]
                    for g in observed_groups(bundle):
                        for rate in bundle.rates:
                            a = list(idx.fold_values(tr, ts, target, rate, g, m).values())
                            b = list(idx.fold_values(tr, ts, target, rate, "All", m).values())
                            if len(a) < 2 or len(b) < 2:
                                continue
                            res = independent_t(a, b, equal_var=bundle.equal_var)
                            fam.append([tr, ts, target, g, m, rate, float(np.mean(a)), float(np.mean(b)),
                                        res.statistic, res.df, res.p_value])
    return _bh_rows(families, q)


INTER_GROUP_COLUMNS = ["trainer", "test_set", "target", "group", "metric", "rate", "mean_group", "mean_overall",
                       "t", "df", "p_value", "bh_reject"]


def _bh_rows(families, q) -> list[list]:
    rows = []
    for fam in families.values():
        if not fam:
            continue
        rej = benjamini_hochberg([r[-1] for r in fam], q)
        rows += [r + [bool(f)] for r, f in zip(fam, rej)]
    return rows


def crossover_rows(bundle: ResultsBundle, idx: RecordIndex) -> list[list]:
    rows = []
    for tr in bundle.trainers:
        for ts in bundle.test_sets:
            for target in bundle.targets:
                for g in observed_groups(bundle):
                    for m in METRICS:
                        diffs = []
                        for rate in bundle.rates:
                            gv = idx.fold_values(tr, ts, target, rate, g, m)
                            ov = idx.fold_values(tr, ts, target, rate, "All", m)
                            common = [f for f in gv if f in ov]
                            diffs.append(float(np.mean([gv[f] - ov[f] for f in common])) if common else None)
                        for c in detect_crossovers(diffs, bundle.rates, m, g):
                            rows.append([tr, ts, target, g, m, c.rate_low, c.rate_high, c.delta_low, c.delta_high,
                                         c.degenerate])
    return rows


CROSSOVER_COLUMNS = ["trainer", "test_set", "target", "group", "metric", "rate_low", "rate_high", "delta_low",
                     "delta_high", "degenerate"]


def size_correlation_rows(bundle: ResultsBundle, reports) -> list[list]:
    rows = []
    if not bundle.train_sizes:
        return rows
    for tr in bundle.trainers:
        for ts in bundle.test_sets:
            for m in METRICS:
                sel = [r for r in reports if r.trainer == tr and r.test_set == ts and r.metric == m]
                for measure in ("nu", "alt_metric_1", "alt_metric_2"):
                    try:
                        rs, p = vulnerability_vs_size(sel, bundle.train_sizes, measure)
                    except InsufficientDataError:
                        continue
                    n = sum(1 for r in sel if r.on_diagonal and getattr(r, measure) is not None)
                    rows.append([tr, ts, m, measure, rs, p, n])
    return rows


SIZE_COLUMNS = ["trainer", "test_set", "metric", "measure", "spearman_r", "p_value", "n_groups"]


@dataclass
class Report:
    reports: list[VulnerabilityReport]
    files: list[Path]


def emit_report(bundle: ResultsBundle, out_dir: str | Path) -> Report:
    if not bundle.records:
        raise EmptyResultsError("no evaluation records")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    idx = RecordIndex(bundle.records)
    reports = vulnerability_reports(bundle, idx)
    files = []

    def put(name, header, rows):
        p = out / name
        _write_csv(p, header, rows)
        files.append(p)

    write_records_csv(out / "records.csv", bundle.records)
    files.append(out / "records.csv")
    put("vulnerability.csv", REPORT_COLUMNS, [[r.trainer, r.test_set, r.target, r.observed_group, r.metric, r.nu,
                                               r.alpha, r.alt_metric_1, r.alt_metric_2, r.point_count,
                                               r.converged, r.note] for r in reports])
    put("table_b1.csv", B1_COLUMNS, table_b1(reports))
    for name, (header, rows) in heatmaps(bundle, reports).items():
        put(name, header, rows)
    put("curves.csv", CURVE_COLUMNS, curves(bundle, idx))
    put("inter_rate.csv", INTER_RATE_COLUMNS, inter_rate_tests(bundle, idx))
    put("inter_group.csv", INTER_GROUP_COLUMNS, inter_group_tests(bundle, idx))
    put("crossovers.csv", CROSSOVER_COLUMNS, crossover_rows(bundle, idx))
    put("size_correlation.csv", SIZE_COLUMNS, size_correlation_rows(bundle, reports))

    notices = list(bundle.notices)
    notices += [f"group {g} has no samples in any test set; omitted from reports" for g in omitted_groups(bundle)
                if g != "All"]
    (out / "notices.txt").write_text("".join(n + "\n" for n in notices))
    (out / "bundle.json").write_text(json.dumps({**bundle.meta(), "notices": bundle.notices}, indent=2,
                                                sort_keys=True) + "\n")
    files += [out / "notices.txt", out / "bundle.json"]
    return Report(reports, files)
