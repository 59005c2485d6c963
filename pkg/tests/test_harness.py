import csv
import json

import numpy as np
import pytest

from advbias.classifier import TrainerConfig
from advbias.cli import main
from advbias.core import AgeBin, GroupKey, Sex
from advbias.harness import (
    AuditInput,
    ConfigError,
    EmptyResultsError,
    ExperimentConfig,
    ExternalCohort,
    GridContext,
    InvalidAuditError,
    ResultsBundle,
    WORKERS_ENV,
    emit_report,
    export_scores,
    grid_cells,
    run_audit,
    run_grid,
)
from advbias.harness.audit import REQUIRED
from advbias.harness.grid import Cell, default_workers, read_cells
from advbias.harness.report import table_b1, vulnerability_reports
from advbias.synthgen import GroupOverride, rsna_like_spec

M, F = GroupKey(sex=Sex.MALE), GroupKey(sex=Sex.FEMALE)
FAST = TrainerConfig(max_epochs=4, early_stop_patience=1)


def small_config(**kw):
    base = dict(cohort=rsna_like_spec(800, seed=1), targets=(M, F), rates=(0.0, 0.5, 1.0), fold_count=2,
                trainers=(FAST,), root_seed=3)
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def grid_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("grid")
    summary = run_grid(small_config(), out)
    assert summary.exit_code == 0
    return out


def test_grid_cardinality(grid_dir):
    lines = (grid_dir / "cells.jsonl").read_text().splitlines()
    assert len(lines) == 12
    keys = [json.loads(x)["key"] for x in lines]
    assert len(set(keys)) == 12
    assert len(grid_cells(small_config())) == small_config().cell_count == 12
    assert len(list((grid_dir / "scores").iterdir())) == 12


def test_default_grid_size():
    assert ExperimentConfig().cell_count == 17 * 7 * 5 * 2


def test_resume_skips_completed(grid_dir, tmp_path):
    summary = run_grid(small_config(), grid_dir, resume=True)
    assert (summary.ran, summary.skipped) == (0, 12)
    # drop two cells; only those are retrained
    lines = (grid_dir / "cells.jsonl").read_text().splitlines()
    part = tmp_path / "part"
    part.mkdir()
    (part / "cells.jsonl").write_text("\n".join(lines[:-2]) + "\n")
    (part / "config.json").write_text((grid_dir / "config.json").read_text())
    (part / "scores").mkdir()
    for p in (grid_dir / "scores").iterdir():
        (part / "scores" / p.name).write_bytes(p.read_bytes())
    summary = run_grid(small_config(), part, resume=True)
    assert (summary.ran, summary.skipped) == (2, 10)
    assert (part / "records.csv").read_bytes() == (grid_dir / "records.csv").read_bytes()


def test_resume_rejects_other_config(grid_dir):
    with pytest.raises(ConfigError):
        run_grid(small_config(root_seed=4), grid_dir, resume=True, report=False)


def test_baseline_integrity(grid_dir):
    cells = read_cells(grid_dir)
    for fold in range(2):
        a = cells[f"M|0.0|{fold}|logistic"]
        b = cells[f"F|0.0|{fold}|logistic"]
        strip = lambda recs: [{k: v for k, v in r.items() if k != "target"} for r in recs]  # noqa: E731
        assert strip(a["records"]) == strip(b["records"])
        assert a["manifest"]["flipped_indices"] == [] == b["manifest"]["flipped_indices"]
        assert a["training"]["seed"] == b["training"]["seed"]
    # independent of the in-process clean-model cache
    cfg = small_config()
    r1, _ = GridContext(cfg).run(Cell(M, 0.0, 1, FAST))
    r2, _ = GridContext(cfg).run(Cell(F, 0.0, 1, FAST))
    assert [x.confusion for x in r1.records] == [x.confusion for x in r2.records]


def test_partial_failure_exit_code(tmp_path, monkeypatch):
    real = GridContext.run

    def flaky(self, cell):
        if cell.rate == 0.5 and cell.fold == 1:
            raise RuntimeError("boom")
        return real(self, cell)

    monkeypatch.setattr(GridContext, "run", flaky)
    summary = run_grid(small_config(), tmp_path)
    assert summary.failed == 2 and summary.exit_code == 2
    errs = [c for c in read_cells(tmp_path).values() if c["status"] == "error"]
    assert len(errs) == 2 and "boom" in errs[0]["error"]
    monkeypatch.setattr(GridContext, "run", real)
    summary = run_grid(small_config(), tmp_path, resume=True)
    assert (summary.ran, summary.failed, summary.exit_code) == (2, 0, 0)


def test_parallel_matches_serial(grid_dir, tmp_path):
    run_grid(small_config(), tmp_path, workers=2)
    for name in ("records.csv", "vulnerability.csv", "inter_rate.csv"):
        assert (tmp_path / name).read_bytes() == (grid_dir / name).read_bytes()


def test_workers_env(monkeypatch):
    monkeypatch.delenv(WORKERS_ENV, raising=False)
    assert default_workers() == 1
    monkeypatch.setenv(WORKERS_ENV, "3")
    assert default_workers() == 3
    for bad in ("0", "two"):
        monkeypatch.setenv(WORKERS_ENV, bad)
        with pytest.raises(ConfigError):
            default_workers()


@pytest.mark.parametrize("change", [
    dict(rates=(0.5, 1.0)), dict(rates=(0.0, 1.0, 0.5)), dict(rates=(0.0, 1.5)), dict(targets=()),
    dict(targets=(GroupKey.all(),)), dict(trainers=(FAST, FAST)), dict(fold_count=0),
    dict(external_cohorts=(ExternalCohort("internal"),)), dict(threshold_source="train"),
    dict(external_cohorts=(ExternalCohort("x", mix="mimic"),)), dict(equal_var="yes")])
def test_config_validation(change):
    with pytest.raises(ConfigError):
        small_config(**change).validate()


def test_config_json_round_trip(tmp_path):
    ext = ExternalCohort("chex", (GroupOverride(GroupKey(age_bin=AgeBin.B0_20), count=0),), 0.1, "chexpert", 500)
    cfg = small_config(external_cohorts=(ext,))
    assert ExperimentConfig.from_dict(json.loads(cfg.to_json())) == cfg
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**cfg.to_dict(), "colour": "red"})
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "bad.json")
    internal, externals = cfg.build_cohorts()
    assert not externals["chex"].group_mask(GroupKey(age_bin=AgeBin.B0_20)).any()
    assert externals["chex"].age_years.min() >= 20


def test_report_shapes(grid_dir):
    hm = list(grid_dir.glob("heatmap_FNR_internal_logistic_sex.csv"))
    assert len(hm) == 1
    rows = list(csv.reader(hm[0].open()))
    assert rows[0] == ["target", "M", "F"] and [r[0] for r in rows[1:]] == ["M", "F"]
    assert len(rows) == 3 and all(len(r) == 3 for r in rows)
    # curves: one row per (rate, group) for each trainer / test set / target / metric
    curves = list(csv.DictReader((grid_dir / "curves.csv").open()))
    sel = [r for r in curves if r["target"] == "F" and r["metric"] == "FNR"]
    assert len({(r["rate"], r["group"]) for r in sel}) == len(sel)
    assert {"mean", "ci_half_width", "n_folds"} <= set(sel[0])


def test_most_flag_is_argmax(grid_dir):
    bundle = ResultsBundle.load(grid_dir)
    rows = table_b1(vulnerability_reports(bundle))
    by_cell = {}
    for tr, cat, g, m, ts, nu, flag, _ in rows:
        by_cell.setdefault((tr, ts, m, cat), []).append((nu, flag))
    for vals in by_cell.values():
        best = max(vals, key=lambda v: v[0])
        assert best[1] == "most"
        assert min(vals, key=lambda v: v[0])[1] == "least"


def test_empty_results(tmp_path):
    with pytest.raises(EmptyResultsError):
        emit_report(ResultsBundle.from_records([]), tmp_path)


# -- audit ------------------------------------------------------------------------

def _audit_rows(rates=(0.0, 0.5), ages=(10, 30, 50, 70), n=40, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    for rate in rates:
        for fold in (0, 1):
            for i in range(n):
                y = int(rng.random() < 0.4)
                rows.append({"sample_id": f"s{i}", "sex": "MF"[i % 2], "age_years": ages[i % len(ages)],
                             "label": y, "score": min(1.0, max(0.0, 0.3 * y + rng.random() * 0.7)),
                             "rate": rate, "fold": fold, "test_set": "internal", "target": "F",
                             "trainer": "ext"})
    return rows


def _write(path, rows, columns=None):
    columns = columns or list(rows[0])
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, columns, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    return path


def test_audit_basic_and_absent_groups(tmp_path):
    res = run_audit(AuditInput.from_csv(_write(tmp_path / "a.csv", _audit_rows())))
    groups = {str(r.group) for r in res.bundle.records}
    assert "80+Y" not in groups and "F 80+Y" not in groups
    assert any("80+Y" in n and "omitted" in n for n in res.bundle.notices)
    rep = emit_report(res.bundle, tmp_path / "out")
    vul = list(csv.DictReader((tmp_path / "out" / "vulnerability.csv").open()))
    assert not any(r["observed_group"] == "80+Y" for r in vul)
    assert rep.reports


def test_audit_errors(tmp_path):
    with pytest.raises(InvalidAuditError):
        run_audit(AuditInput.from_csv(_write(tmp_path / "one.csv", _audit_rows(rates=(0.0,)))))
    with pytest.raises(InvalidAuditError):
        run_audit(AuditInput.from_csv(_write(tmp_path / "nobase.csv", _audit_rows(rates=(0.25, 0.5)))))
    with pytest.raises(InvalidAuditError):
        AuditInput.from_csv(_write(tmp_path / "cols.csv", _audit_rows(), columns=list(REQUIRED[:-1])))


def test_audit_row_rejections(tmp_path):
    rows = _audit_rows()
    rows[0] = {**rows[0], "score": "1.5"}
    rows[3] = {**rows[3], "sex": "X"}
    rows[5] = {**rows[5], "label": "2"}
    rows[7] = {**rows[7], "age_years": "-3"}
    inp = AuditInput.from_csv(_write(tmp_path / "bad.csv", rows))
    assert [line for line, _ in inp.rejected] == [2, 5, 7, 9]
    assert len(inp.rows) == len(rows) - 4
    run_audit(inp)


def test_audit_round_trip(grid_dir, tmp_path):
    n = export_scores(grid_dir, tmp_path / "scores.csv")
    assert n > 0
    res = run_audit(AuditInput.from_csv(tmp_path / "scores.csv"))
    key = lambda r: (str(r.target), r.rate, r.fold, r.trainer, r.test_set, str(r.group))  # noqa: E731
    grid = sorted(ResultsBundle.load(grid_dir).records, key=key)
    assert sorted(res.bundle.records, key=key) == grid


# -- CLI ----------------------------------------------------------------------------

def test_cli_exit_codes(tmp_path, grid_dir):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"rates": [0.5, 1.0]}))
    assert main(["-q", "run", "--config", str(bad)]) == 1
    assert main(["-q", "run", "--config", str(tmp_path / "missing.json")]) == 3
    assert main(["-q", "report", "--results", str(tmp_path / "nothing"), "--out", str(tmp_path / "r")]) == 3
    assert main(["-q", "report", "--results", str(grid_dir), "--out", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r" / "records.csv").read_bytes() == (grid_dir / "records.csv").read_bytes()
    one = _write(tmp_path / "one.csv", _audit_rows(rates=(0.0,)))
    assert main(["-q", "audit", "--input", str(one), "--out", str(tmp_path / "a")]) == 1


def test_cli_run_synth_audit(tmp_path):
    cfg = small_config(targets=(F,), rates=(0.0, 1.0))
    (tmp_path / "cfg.json").write_text(cfg.to_json())
    assert main(["-q", "run", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "res")]) == 0
    assert main(["-q", "run", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "res"),
                 "--resume"]) == 0
    assert main(["-q", "export-scores", "--results", str(tmp_path / "res"), "--out", str(tmp_path / "s.csv")]) == 0
    assert main(["-q", "audit", "--input", str(tmp_path / "s.csv"), "--out", str(tmp_path / "aud")]) == 0
    assert (tmp_path / "aud" / "rejected_rows.csv").read_text() == "line,reason\n"
    assert (tmp_path / "aud" / "records.csv").read_bytes() == (tmp_path / "res" / "records.csv").read_bytes()
    (tmp_path / "spec.json").write_text(json.dumps({"n_total": 200, "seed": 2}))
    assert main(["-q", "synth", "--config", str(tmp_path / "spec.json"), "--out", str(tmp_path / "c.csv")]) == 0
    assert len((tmp_path / "c.csv").read_text().splitlines()) == 201


def test_equal_var_switch(grid_dir, tmp_path):
    bundle = ResultsBundle.load(grid_dir)
    bundle.equal_var = True
    emit_report(bundle, tmp_path)
    welch = list(csv.DictReader((grid_dir / "inter_group.csv").open()))
    pooled = list(csv.DictReader((tmp_path / "inter_group.csv").open()))
    assert len(welch) == len(pooled)
    # two folds per side: pooled df is always 2, Welch df varies
    assert {r["df"] for r in pooled} == {"2.0"}
    assert json.loads((tmp_path / "bundle.json").read_text())["equal_var"] is True
