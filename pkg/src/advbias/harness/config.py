"""Experiment configuration loaded from JSON."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from ..classifier import TrainerConfig
from ..core import GroupKey, enumerate_groups
from ..poison import rate_grid
from ..synthgen import (CHEXPERT_COUNTS, CohortSpec, GroupOverride, InvalidSpecError, _apportion,
                        generate_cohort, generate_external_cohort, override_from_dict, rsna_like_spec)
from ..vulnerability import NU_RIDGE


class ConfigError(ValueError):
    pass


MIXES = {"chexpert": CHEXPERT_COUNTS}


@dataclass(frozen=True)
class ExternalCohort:
    """A shifted test cohort built from the base spec.

    ``mix`` (e.g. "chexpert") first re-apportions the base group counts to
    that demographic mix at ``n_total`` samples (default: the base size);
    ``overrides`` are applied afterwards, so a zero-count pediatric
    override removes 0-20Y entirely.
    """

    name: str
    overrides: tuple[GroupOverride, ...] = ()
    embedding_jitter: float = 0.0
    mix: str | None = None
    n_total: int | None = None
    seed: int | None = None

    def base_spec(self, base: CohortSpec) -> CohortSpec:
        if self.mix is None and self.n_total is None:
            return base
        counts = MIXES[self.mix] if self.mix else {(g.key.sex.value, g.key.age_bin): g.count for g in base.groups}
        alloc = _apportion(counts, self.n_total or base.total)
        groups = tuple(replace(g, count=max(alloc[(g.key.sex.value, g.key.age_bin)], 1)) for g in base.groups)
        return replace(base, groups=groups)

    def generate(self, base: CohortSpec, root_seed: int):
        from ..core import stable_seed

        seed = self.seed if self.seed is not None else stable_seed(root_seed, "external", self.name)
        # embeddings always come from ``base``; only counts/prevalences move
        spec = self.base_spec(base)
        return generate_external_cohort(spec, self.overrides, self.embedding_jitter, seed, self.name)

    def to_dict(self) -> dict:
        return {"name": self.name, "embedding_jitter": self.embedding_jitter, "mix": self.mix,
                "n_total": self.n_total, "seed": self.seed,
                "overrides": [{"key": str(o.key), "count": o.count, "prevalence": o.prevalence, "share": o.share}
                              for o in self.overrides]}

    @classmethod
    def from_dict(cls, d: dict) -> ExternalCohort:
        d = dict(d)
        d["overrides"] = tuple(override_from_dict(o) for o in d.get("overrides", ()))
        return cls(**d)


def _default_trainers() -> tuple[TrainerConfig, ...]:
    return (TrainerConfig("logistic"), TrainerConfig("mlp"))


@dataclass(frozen=True)
class ExperimentConfig:
    cohort: CohortSpec = field(default_factory=rsna_like_spec)
    external_cohorts: tuple[ExternalCohort, ...] = ()
    targets: tuple[GroupKey, ...] = field(default_factory=lambda: tuple(enumerate_groups()))
    rates: tuple[float, ...] = field(default_factory=lambda: tuple(rate_grid()))
    fold_count: int = 5
    trainers: tuple[TrainerConfig, ...] = field(default_factory=_default_trainers)
    root_seed: int = 0
    output_dir: str = "results"
    split_proportions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    threshold_source: str = "val"  # "val": Youden on poisoned val scores; "test": per test set
    nu_ridge: float = NU_RIDGE
    nu_rescale: str = "affine"
    nu_fold_means: bool = False
    equal_var: bool = False  # inter-group tests: pooled variance instead of Welch

    def validate(self) -> None:
        if not self.targets:
            raise ConfigError("targets must be non-empty")
        if not self.rates:
            raise ConfigError("rates must be non-empty")
        if any(not 0.0 <= r <= 1.0 for r in self.rates):
            raise ConfigError("rates must lie in [0, 1]")
        if list(self.rates) != sorted(set(self.rates)):
            raise ConfigError("rates must be strictly ascending")
        if self.rates[0] != 0.0:
            raise ConfigError("rate 0 (baseline) must be present")
        if self.fold_count < 1:
            raise ConfigError("fold_count must be >= 1")
        if not self.trainers:
            raise ConfigError("at least one trainer is required")
        names = [t.name for t in self.trainers]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate trainer names {names}")
        ext = [e.name for e in self.external_cohorts]
        if len(set(ext)) != len(ext) or "internal" in ext or "val" in ext:
            raise ConfigError("external cohort names must be unique and not 'internal'/'val'")
        if len({str(t) for t in self.targets}) != len(self.targets):
            raise ConfigError("duplicate targets")
        if any(t.is_all for t in self.targets):
            raise ConfigError("All is not a valid target")
        if self.threshold_source not in ("val", "test"):
            raise ConfigError("threshold_source must be 'val' or 'test'")
        if self.nu_rescale not in ("affine", "none"):
            raise ConfigError("nu_rescale must be 'affine' or 'none'")
        for name in ("nu_fold_means", "equal_var"):
            if not isinstance(getattr(self, name), bool):
                raise ConfigError(f"{name} must be true or false")
        if not 0 <= self.root_seed < 2 ** 64:
            raise ConfigError("root_seed must be a 64-bit unsigned integer")
        try:
            self.cohort.validate()
            for e in self.external_cohorts:
                if e.mix is not None and e.mix not in MIXES:
                    raise InvalidSpecError(f"unknown mix {e.mix!r}")
        except InvalidSpecError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def test_sets(self) -> list[str]:
        return ["internal"] + [e.name for e in self.external_cohorts]

    @property
    def cell_count(self) -> int:
        return len(self.targets) * len(self.rates) * self.fold_count * len(self.trainers)

    def build_cohorts(self):
        """(internal cohort, {name: external cohort})."""
        return generate_cohort(self.cohort), {e.name: e.generate(self.cohort, self.root_seed)
                                              for e in self.external_cohorts}

    def to_dict(self) -> dict:
        return {
            "cohort": self.cohort.to_dict(),
            "external_cohorts": [e.to_dict() for e in self.external_cohorts],
            "targets": [str(t) for t in self.targets],
            "rates": list(self.rates),
            "fold_count": self.fold_count,
            "trainers": [t.to_dict() for t in self.trainers],
            "root_seed": self.root_seed,
            "output_dir": self.output_dir,
            "split_proportions": list(self.split_proportions),
            "threshold_source": self.threshold_source,
            "nu_ridge": self.nu_ridge,
            "nu_rescale": self.nu_rescale,
            "nu_fold_means": self.nu_fold_means,
            "equal_var": self.equal_var,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            if "cohort" in d:
                d["cohort"] = CohortSpec.from_dict(d["cohort"])
            if "external_cohorts" in d:
                d["external_cohorts"] = tuple(ExternalCohort.from_dict(e) for e in d["external_cohorts"])
            if "targets" in d:
                d["targets"] = tuple(GroupKey.parse(t) for t in d["targets"])
            if "rates" in d:
                d["rates"] = tuple(float(r) for r in d["rates"])
            if "trainers" in d:
                d["trainers"] = tuple(TrainerConfig.from_dict(t) for t in d["trainers"])
            if "split_proportions" in d:
                d["split_proportions"] = tuple(float(p) for p in d["split_proportions"])
            cfg = cls(**d)
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(d)
