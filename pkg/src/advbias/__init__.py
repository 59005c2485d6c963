"""Targeted underdiagnosis label poisoning and subgroup vulnerability auditing."""

from .classifier import ScoreModel, TrainerConfig, train
from .core import AgeBin, Cohort, GroupKey, Sex, SplitPlan, enumerate_groups, make_splits, stable_seed
from .metrics import EvalRecord, auroc, evaluate_groups, evaluate_scores, youden_threshold
from .poison import DEFAULT_RATES, PoisonManifest, inject_underdiagnosis, rate_grid
from .synthgen import CohortSpec, generate_cohort, generate_external_cohort, rsna_like_spec
from .vulnerability import VulnerabilityReport, quasi_logistic_mle, vulnerability_nu

__version__ = "0.1.0"

__all__ = [
    "AgeBin", "Cohort", "CohortSpec", "EvalRecord", "GroupKey", "DEFAULT_RATES", "PoisonManifest", "ScoreModel",
    "Sex", "SplitPlan", "TrainerConfig", "VulnerabilityReport", "auroc", "enumerate_groups", "evaluate_groups",
    "evaluate_scores", "generate_cohort", "generate_external_cohort", "inject_underdiagnosis", "make_splits",
    "quasi_logistic_mle", "rate_grid", "rsna_like_spec", "stable_seed", "train", "vulnerability_nu",
    "youden_threshold",
]
