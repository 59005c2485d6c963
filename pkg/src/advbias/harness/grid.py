"""The poisoning grid: one cell per (target, rate, fold, trainer).

Seeds
-----
poison seed   = stable_seed(root_seed, "poison", target, rate, fold)
training seed = stable_seed(root_seed, "train", fold, trainer.name)
split seed    = stable_seed(root_seed, "split")

The training seed leaves out target and rate, so all rate-0 cells of a
(fold, trainer) pair train the same model whatever the target.

Persistence
-----------
Cells are appended to ``cells.jsonl`` by the parent process only; score
vectors go to ``scores/<cell-key>.npz``. On ``resume`` every cell with an
``ok`` line is skipped; failed cells are retried.
"""

from __future__ import annotations

import json
import os
import shutil
import time
import traceback
import warnings
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..classifier import TrainerConfig, train
from ..core import Cohort, GroupKey, SplitPlan, enumerate_groups, make_splits, stable_seed
from ..metrics import EvalRecord, evaluate_scores, youden_threshold
from ..poison import EmptyTargetWarning, PoisonManifest, inject_underdiagnosis
from .config import ConfigError, ExperimentConfig

WORKERS_ENV = "ADVBIAS_WORKERS"
CELLS_FILE = "cells.jsonl"
SCORES_DIR = "scores"


def default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV}={raw!r} is not an integer") from None
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be >= 1")
    return n


@dataclass(frozen=True)
class Cell:
    target: GroupKey
    rate: float
    fold: int
    trainer: TrainerConfig

    @property
    def key(self) -> str:
        return f"{self.target}|{self.rate!r}|{self.fold}|{self.trainer.name}"

    @property
    def file_stem(self) -> str:
        return f"{stable_seed('cell', self.key):016x}"


def grid_cells(config: ExperimentConfig) -> list[Cell]:
    return [Cell(t, float(r), k, tr) for t in config.targets for r in config.rates
            for k in range(config.fold_count) for tr in config.trainers]


def poison_seed(root_seed: int, target: GroupKey, rate: float, fold: int) -> int:
    return stable_seed(root_seed, "poison", str(target), float(rate), fold)


def training_seed(root_seed: int, fold: int, trainer: TrainerConfig) -> int:
    return stable_seed(root_seed, "train", fold, trainer.name)


@dataclass
class CellResult:
    target: GroupKey
    rate: float
    fold: int
    trainer: str
    status: str  # "ok" or "error"
    records: list[EvalRecord] = field(default_factory=list)
    manifest: PoisonManifest | None = None
    training: dict = field(default_factory=dict)
    threshold: float | None = None
    absent: dict = field(default_factory=dict)  # test set -> absent group labels
    error: str = ""

    @property
    def key(self) -> str:
        return f"{self.target}|{self.rate!r}|{self.fold}|{self.trainer}"

    def to_dict(self) -> dict:
        return {"key": self.key, "target": str(self.target), "rate": self.rate, "fold": self.fold,
                "trainer": self.trainer, "status": self.status, "threshold": self.threshold,
                "training": self.training, "absent": self.absent, "error": self.error,
                "manifest": None if self.manifest is None else self.manifest.to_dict(),
                "records": [r.to_dict() for r in self.records]}

    @classmethod
    def from_dict(cls, d: dict) -> CellResult:
        return cls(GroupKey.parse(d["target"]), float(d["rate"]), int(d["fold"]), d["trainer"], d["status"],
                   [EvalRecord.from_dict(r) for r in d["records"]],
                   None if d["manifest"] is None else PoisonManifest.from_dict(d["manifest"]),
                   d.get("training", {}), d.get("threshold"), d.get("absent", {}), d.get("error", ""))


def group_train_sizes(cohort: Cohort, plan: SplitPlan) -> dict[str, float]:
    """Mean training-partition size per group over folds."""
    train = plan.assignments == 0
    return {str(g): float(train[:, cohort.group_mask(g)].sum(axis=1).mean()) for g in enumerate_groups()}


class GridContext:
    """Cohorts, splits and a per-process cache of clean-label models."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.cohort, self.externals = config.build_cohorts()
        self.plan = make_splits(self.cohort, config.fold_count, config.split_proportions,
                                stable_seed(config.root_seed, "split"))
        self.groups = [g for g in enumerate_groups()]
        self._clean_models = {}

    def test_cohorts(self) -> dict[str, Cohort]:
        test = self.cohort.subset(self.plan.indices(0, "test"))
        return {"internal": test, **self.externals}

    def run(self, cell: Cell) -> tuple[CellResult, dict]:
        cfg = self.config
        c = self.cohort
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", EmptyTargetWarning)
            labels, manifest = inject_underdiagnosis(c, self.plan, cell.fold, cell.target, cell.rate,
                                                     poison_seed(cfg.root_seed, cell.target, cell.rate, cell.fold))
        tr = self.plan.indices(cell.fold, "train")
        va = self.plan.indices(cell.fold, "val")
        tcfg = replace(cell.trainer, seed=training_seed(cfg.root_seed, cell.fold, cell.trainer))
        clean_key = (cell.fold, cell.trainer.name)
        t0 = time.perf_counter()
        if manifest.n_flipped == 0 and clean_key in self._clean_models:
            model = self._clean_models[clean_key]
        else:
            model = train(c.features[tr], labels[tr], c.features[va], labels[va], tcfg)
            if manifest.n_flipped == 0:
                self._clean_models[clean_key] = model
        val_scores = model.predict_proba(c.features[va])
        threshold = youden_threshold(val_scores, labels[va]) if cfg.threshold_source == "val" else None
        tags = dict(target=cell.target, rate=cell.rate, fold=cell.fold, trainer=cell.trainer.name)
        records, absent = [], {}
        scores = {"val": val_scores, "val_labels": labels[va], "val_index": va}
        for name, tc in self.test_cohorts().items():
            s = model.predict_proba(tc.features)
            ev = evaluate_scores(s, tc.labels, tc.sex, tc.age_bins, self.groups, threshold, test_set=name, **tags)
            records += ev.records
            if ev.absent:
                absent[name] = [str(g) for g in ev.absent]
            scores[name] = s
        best_val = min(h[2] for h in model.history) if model.history else None
        training = {"seed": tcfg.seed, "best_epoch": model.best_epoch, "epochs_run": len(model.history),
                    "best_val_loss": best_val, "train_size": int(tr.size), "val_size": int(va.size),
                    "seconds": round(time.perf_counter() - t0, 3),
                    "warnings": [str(w.message) for w in caught]}
        result = CellResult(cell.target, cell.rate, cell.fold, cell.trainer.name, "ok", records, manifest,
                            training, threshold, absent)
        return result, scores


# -- worker plumbing -----------------------------------------------------------

_CTX: GridContext | None = None


def _init_worker(config_dict: dict) -> None:
    global _CTX
    _CTX = GridContext(ExperimentConfig.from_dict(config_dict))


def _run_safely(ctx: GridContext, cell: Cell):
    try:
        return ctx.run(cell)
    except Exception as exc:  # a failed cell must not stop the grid
        err = f"{type(exc).__name__}: {exc}\n{traceback.format_exc(limit=3)}"
        return CellResult(cell.target, cell.rate, cell.fold, cell.trainer.name, "error", error=err), None


def _worker_run(cell: Cell):
    return _run_safely(_CTX, cell)


# -- persistence -----------------------------------------------------------------

def read_cells(out_dir: str | Path) -> dict[str, dict]:
    """Latest line per cell key; a truncated trailing line is ignored."""
    path = Path(out_dir) / CELLS_FILE
    out = {}
    if not path.exists():
        return out
    with path.open() as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError:
                continue
            out[d["key"]] = d
    return out


def _save_scores(out_dir: Path, cell: Cell, scores: dict) -> None:
    np.savez(out_dir / SCORES_DIR / f"{cell.file_stem}.npz", **scores)


def load_scores(out_dir: str | Path, cell: Cell) -> dict[str, np.ndarray]:
    with np.load(Path(out_dir) / SCORES_DIR / f"{cell.file_stem}.npz") as z:
        return {k: z[k] for k in z.files}


@dataclass
class RunSummary:
    out_dir: Path
    total: int
    ran: int
    skipped: int
    failed: int

    @property
    def exit_code(self) -> int:
        return 2 if self.failed else 0


def _prepare_dir(config: ExperimentConfig, out: Path, resume: bool) -> None:
    cfg_path = out / "config.json"
    if resume and cfg_path.exists():
        stored = json.loads(cfg_path.read_text())
        mine = json.loads(config.to_json())
        stored.pop("output_dir", None)
        mine.pop("output_dir", None)
        if stored != mine:
            raise ConfigError(f"{out} holds results for a different config; rerun without --resume")
    if not resume:
        for p in (out / CELLS_FILE, out / SCORES_DIR):
            if p.is_dir():
                shutil.rmtree(p)
            elif p.exists():
                p.unlink()
    (out / SCORES_DIR).mkdir(parents=True, exist_ok=True)
    cfg_path.write_text(config.to_json() + "\n")


def run_grid(config: ExperimentConfig, out_dir: str | Path | None = None, workers: int | None = None,
             resume: bool = False, report: bool = True, progress=None) -> RunSummary:
    """Run (or finish) every cell, then assemble reports.

    ``progress`` is an optional callable receiving each CellResult.
    """
    config.validate()
    out = Path(out_dir if out_dir is not None else config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    workers = default_workers() if workers is None else workers
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    _prepare_dir(config, out, resume)

    done = {k for k, d in read_cells(out).items() if d["status"] == "ok"} if resume else set()
    cells = grid_cells(config)
    todo = [c for c in cells if c.key not in done]
    failed = 0
    started = time.strftime("%Y-%m-%dT%H:%M:%S")

    with (out / CELLS_FILE).open("a") as fh:
        def persist(cell, result, scores):
            nonlocal failed
            if scores is not None:
                _save_scores(out, cell, scores)
            fh.write(json.dumps(result.to_dict()) + "\n")
            fh.flush()
            failed += result.status != "ok"
            if progress is not None:
                progress(result)

        if todo and workers == 1:
            ctx = GridContext(config)
            for cell in todo:
                persist(cell, *_run_safely(ctx, cell))
        elif todo:
            with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker,
                                     initargs=(config.to_dict(),)) as pool:
                futures = {pool.submit(_worker_run, c): c for c in todo}
                for fut in as_completed(futures):
                    persist(futures[fut], *fut.result())

    (out / "run_manifest.json").write_text(json.dumps({
        "started": started, "finished": time.strftime("%Y-%m-%dT%H:%M:%S"), "cells_total": len(cells),
        "cells_run": len(todo), "cells_skipped": len(cells) - len(todo), "cells_failed": failed,
        "workers": workers, "resume": resume}, indent=2) + "\n")

    if report:
        from .report import ResultsBundle, emit_report
        emit_report(ResultsBundle.load(out), out)
    return RunSummary(out, len(cells), len(todo), len(cells) - len(todo), failed)
