"""Demographically targeted underdiagnosis label poisoning."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .core import Cohort, GroupKey, SplitPlan

DEFAULT_RATES = (0.0, 0.05, 0.1, 0.25, 0.5, 0.75, 1.0)


class InvalidRateError(ValueError):
    pass


class EmptyTargetWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PoisonManifest:
    target: GroupKey
    rate: float
    fold: int
    flipped_indices: tuple[int, ...]
    eligible_count: int
    seed: int

    @property
    def n_flipped(self) -> int:
        return len(self.flipped_indices)

    def to_dict(self) -> dict:
        return {"target": str(self.target), "rate": self.rate, "fold": self.fold,
                "flipped_indices": list(self.flipped_indices),
                "eligible_count": self.eligible_count, "seed": self.seed}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> PoisonManifest:
        return cls(GroupKey.parse(d["target"]), float(d["rate"]), int(d["fold"]),
                   tuple(d["flipped_indices"]), int(d["eligible_count"]), int(d["seed"]))


def rate_grid() -> list[float]:
    return list(DEFAULT_RATES)


def flip_count(rate: float, eligible: int) -> int:
    """round_half_up(rate * eligible), computed on the decimal repr of ``rate``."""
    return int((Decimal(repr(float(rate))) * eligible).to_integral_value(rounding=ROUND_HALF_UP))


def eligible_mask(cohort: Cohort, plan: SplitPlan, fold: int, target: GroupKey) -> np.ndarray:
    """Target-matching positives in the train or val partition of ``fold``."""
    return cohort.group_mask(target) & (cohort.labels == 1) & (plan.assignments[fold] != 2)


def inject_underdiagnosis(cohort: Cohort, plan: SplitPlan, fold: int, target: GroupKey,
                          rate: float, seed: int) -> tuple[np.ndarray, PoisonManifest]:
    """Flip ``round_half_up(rate * n_eligible)`` eligible labels from 1 to 0.

    Flipped samples are drawn uniformly without replacement. Test-partition
    labels are never touched. Returns a fresh label array and the manifest.
    """
    if not 0.0 <= rate <= 1.0:
        raise InvalidRateError(f"rate must lie in [0, 1], got {rate!r}")
    if not 0 <= fold < plan.fold_count:
        raise IndexError(f"fold {fold} out of range for {plan.fold_count} folds")
    labels = np.array(cohort.labels, copy=True)
    eligible = np.flatnonzero(eligible_mask(cohort, plan, fold, target))
    if eligible.size == 0:
        warnings.warn(f"target {target} has no eligible positives in fold {fold}", EmptyTargetWarning, stacklevel=2)
    k = flip_count(rate, eligible.size)
    rng = np.random.default_rng(seed)
    flipped = np.sort(rng.choice(eligible, size=k, replace=False)) if k else np.empty(0, dtype=int)
    labels[flipped] = 0
    manifest = PoisonManifest(target, float(rate), fold, tuple(int(i) for i in flipped), int(eligible.size), int(seed))
    return labels, manifest
