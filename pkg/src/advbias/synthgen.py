"""Synthetic cohorts with disease signal plus sex and age embeddings.

Feature model, per sample::

    x = y * severity * disease + sex_emb[sex] + age_emb(age) + noise_std * N(0, I)

``severity`` is log-normal with mean 1 and log-scale ``severity_spread``
(exactly 1 when the spread is 0), so positives range from mild cases
near the decision boundary to florid ones.

The disease direction, the two sex directions and a five-dimensional age
subspace come from one random orthonormal basis. Each age bin has an
anchor embedding of norm ``age_embedding_scale`` with
``cos(anchor_k, anchor_j) = age_similarity ** |k - j|``. With
``continuous_age`` a sample's age embedding interpolates linearly between
the anchors at the bin centres (10, 30, 50, 70, 90 years), so a
59-year-old resembles a 61-year-old more than a 41-year-old; otherwise it
is the anchor of the sample's bin.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import AgeBin, Cohort, GroupKey, InvalidInputError, Sex, intersection_groups, stable_seed

# Per-intersection mean training-split image counts of the internal RSNA
# cohort; used only as proportions (Male 56%, 40-60Y 44%).
RSNA_COUNTS = {
    ("M", AgeBin.B0_20): 638, ("M", AgeBin.B20_40): 2597, ("M", AgeBin.B40_60): 4454,
    ("M", AgeBin.B60_80): 2631, ("M", AgeBin.B80_PLUS): 108,
    ("F", AgeBin.B0_20): 433, ("F", AgeBin.B20_40): 2085, ("F", AgeBin.B40_60): 3695,
    ("F", AgeBin.B60_80): 1750, ("F", AgeBin.B80_PLUS): 108,
}

# CheXpert-like external proportions (no pediatric patients in practice).
CHEXPERT_COUNTS = {
    ("M", AgeBin.B0_20): 1049, ("M", AgeBin.B20_40): 14460, ("M", AgeBin.B40_60): 35203,
    ("M", AgeBin.B60_80): 45251, ("M", AgeBin.B80_PLUS): 15021,
    ("F", AgeBin.B0_20): 653, ("F", AgeBin.B20_40): 10102, ("F", AgeBin.B40_60): 23437,
    ("F", AgeBin.B60_80): 29659, ("F", AgeBin.B80_PLUS): 15021,
}

MIN_FEATURE_DIM = 8  # disease + 2 sex + 5 age directions


class InvalidSpecError(ValueError):
    pass


@dataclass(frozen=True)
class GroupSpec:
    key: GroupKey
    count: int
    prevalence: float = 0.2


@dataclass(frozen=True)
class GroupOverride:
    """Partial change to the groups matched by ``key`` (any non-All key).

    ``count`` is the new total for all matched intersections, split in
    proportion to their base counts. ``share`` instead rescales matched
    groups to that fraction of the cohort, keeping the total fixed.
    """

    key: GroupKey
    count: int | None = None
    prevalence: float | None = None
    share: float | None = None


@dataclass(frozen=True)
class CohortSpec:
    groups: tuple[GroupSpec, ...]
    feature_dim: int = 16
    disease_signal: float | tuple[float, ...] = 6.0
    group_embedding_scale: float = 1.5
    age_embedding_scale: float | None = 3.0  # None -> group_embedding_scale
    age_similarity: float = 0.5
    continuous_age: bool = True  # interpolate age embeddings by age in years
    noise_std: float = 1.0
    severity_spread: float = 0.0
    seed: int = 0
    images_per_patient: int = 1
    provenance: str = "synthetic"

    def validate(self) -> None:
        if self.feature_dim < MIN_FEATURE_DIM:
            raise InvalidSpecError(f"feature_dim must be >= {MIN_FEATURE_DIM}")
        keys = [g.key for g in self.groups]
        if sorted(map(str, keys)) != sorted(map(str, intersection_groups())):
            raise InvalidSpecError("exactly one GroupSpec per sex x age intersection is required")
        for g in self.groups:
            if g.count < 1:
                raise InvalidSpecError(f"group {g.key} has count {g.count}")
            if not 0 <= g.prevalence <= 1:
                raise InvalidSpecError(f"group {g.key} prevalence {g.prevalence} outside [0, 1]")
        if not np.isscalar(self.disease_signal) and len(self.disease_signal) != self.feature_dim:
            raise InvalidSpecError("disease_signal vector length must equal feature_dim")
        if self.group_embedding_scale < 0 or self.age_scale < 0:
            raise InvalidSpecError("embedding scales must be non-negative")
        if not 0 <= self.age_similarity <= 1:
            raise InvalidSpecError("age_similarity must lie in [0, 1]")
        if not self.noise_std > 0:
            raise InvalidSpecError("noise_std must be positive")
        if self.severity_spread < 0:
            raise InvalidSpecError("severity_spread must be non-negative")
        if self.images_per_patient < 1:
            raise InvalidSpecError("images_per_patient must be >= 1")

    @property
    def age_scale(self) -> float:
        return self.group_embedding_scale if self.age_embedding_scale is None else self.age_embedding_scale

    @property
    def total(self) -> int:
        return sum(g.count for g in self.groups)

    # -- JSON config ----------------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["groups"] = [{"key": str(g.key), "count": g.count, "prevalence": g.prevalence} for g in self.groups]
        if not np.isscalar(self.disease_signal):
            d["disease_signal"] = list(self.disease_signal)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> CohortSpec:
        d = dict(d)
        if "groups" in d:
            d["groups"] = tuple(GroupSpec(GroupKey.parse(g["key"]), int(g["count"]), float(g.get("prevalence", 0.2)))
                                for g in d["groups"])
        else:
            # shorthand: {"n_total": 10000, "prevalence": 0.2} with RSNA proportions
            base = rsna_like_spec(int(d.pop("n_total", 10000)), float(d.pop("prevalence", 0.2)))
            d["groups"] = base.groups
        d.pop("n_total", None)
        d.pop("prevalence", None)
        if isinstance(d.get("disease_signal"), list):
            d["disease_signal"] = tuple(d["disease_signal"])
        return cls(**d)


def _apportion(weights: dict, total: int) -> dict:
    """Largest-remainder rounding of ``total`` by ``weights``."""
    keys = list(weights)
    w = np.array([weights[k] for k in keys], dtype=float)
    raw = w / w.sum() * total
    out = np.floor(raw).astype(int)
    for j in np.argsort(-(raw - out), kind="stable")[: total - out.sum()]:
        out[j] += 1
    return dict(zip(keys, out.tolist()))


def spec_from_counts(counts: dict, n_total: int, prevalence: float = 0.2, **kw) -> CohortSpec:
    alloc = _apportion(counts, n_total)
    groups = tuple(GroupSpec(GroupKey(Sex(s), b), max(alloc[(s, b)], 1), prevalence) for (s, b) in counts)
    return CohortSpec(groups=groups, **kw)


def rsna_like_spec(n_total: int = 10000, prevalence: float = 0.2, **kw) -> CohortSpec:
    """Cohort spec with the internal-dataset demographic mix."""
    return spec_from_counts(RSNA_COUNTS, n_total, prevalence, **kw)


@dataclass(frozen=True)
class _Embeddings:
    disease: np.ndarray
    sex: dict
    age: dict


def _embeddings(spec: CohortSpec) -> _Embeddings:
    d = spec.feature_dim
    rng = np.random.default_rng(stable_seed("basis", spec.seed))
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    if np.isscalar(spec.disease_signal):
        disease = float(spec.disease_signal) * q[:, 0]
    else:
        disease = np.asarray(spec.disease_signal, dtype=float)
    scale = spec.group_embedding_scale
    sex = {"M": scale * q[:, 1], "F": scale * q[:, 2]}
    # cos(age_k, age_j) = age_similarity ** |k - j|: rows of a Cholesky
    # factor of that Gram matrix, expressed in basis columns 3..7
    idx = np.arange(len(AgeBin))
    gram = spec.age_similarity ** np.abs(idx[:, None] - idx[None, :]).astype(float)
    chol = np.linalg.cholesky(gram + 1e-12 * np.eye(len(idx)))
    age = {k: spec.age_scale * (q[:, 3:8] @ chol[int(k)]) for k in AgeBin}
    return _Embeddings(disease, sex, age)


def _jitter(emb: _Embeddings, amount: float, rng: np.random.Generator) -> _Embeddings:
    if amount == 0:
        return emb

    def j(v):
        norm = np.linalg.norm(v)
        return v + amount * norm * rng.standard_normal(v.shape) / np.sqrt(v.size)

    return _Embeddings(emb.disease, {k: j(v) for k, v in emb.sex.items()}, {k: j(v) for k, v in emb.age.items()})


AGE_ANCHORS = np.array([10.0, 30.0, 50.0, 70.0, 90.0])  # bin centres (80+ taken as 80-100)


def _age_embedding(emb: _Embeddings, age: np.ndarray) -> np.ndarray:
    """Linear interpolation between bin-centre embeddings, clamped at the ends."""
    anchors = np.array([emb.age[k] for k in AgeBin])
    t = np.clip((age - AGE_ANCHORS[0]) / 20.0, 0.0, len(AGE_ANCHORS) - 1.0)
    k0 = np.minimum(t.astype(int), len(AGE_ANCHORS) - 2)
    frac = (t - k0)[:, None]
    return (1 - frac) * anchors[k0] + frac * anchors[k0 + 1]


def _sample(spec: CohortSpec, emb: _Embeddings, sample_seed: int, provenance: str) -> Cohort:
    rng = np.random.default_rng(sample_seed)
    pids, feats, labels, sexes, ages = [], [], [], [], []
    for gi, g in enumerate(spec.groups):
        n = g.count
        if n == 0:
            continue
        s, b = g.key.sex.value, g.key.age_bin
        y = (rng.random(n) < g.prevalence).astype(np.int8)
        hi = 95.0 if b is AgeBin.B80_PLUS else b.upper
        age = rng.uniform(b.lower, hi, n)
        sev = np.exp(spec.severity_spread * rng.standard_normal(n) - spec.severity_spread ** 2 / 2)
        age_emb = _age_embedding(emb, age) if spec.continuous_age else emb.age[b]
        x = ((y * sev)[:, None] * emb.disease + emb.sex[s] + age_emb
             + spec.noise_std * rng.standard_normal((n, spec.feature_dim)))
        pids += [f"P{gi:02d}-{i // spec.images_per_patient:06d}" for i in range(n)]
        feats.append(x)
        labels.append(y)
        sexes += [s] * n
        ages.append(age)
    if not feats:
        raise InvalidSpecError("cohort would contain no samples")
    return Cohort(np.array(pids), np.vstack(feats), np.concatenate(labels), np.array(sexes),
                  np.concatenate(ages), provenance)


def generate_cohort(spec: CohortSpec) -> Cohort:
    spec.validate()
    return _sample(spec, _embeddings(spec), stable_seed("samples", spec.seed), spec.provenance)


def apply_overrides(base: CohortSpec, overrides) -> CohortSpec:
    groups = {str(g.key): g for g in base.groups}
    total = base.total
    for ov in overrides:
        if ov.key.is_all:
            raise InvalidSpecError("overrides must name a demographic group, not All")
        hit = [k for k, g in groups.items() if ov.key.matches(g.key.sex, g.key.age_bin)]
        if not hit:
            raise InvalidSpecError(f"override {ov.key} matches no group")
        if ov.count is not None and ov.share is not None:
            raise InvalidSpecError("give count or share, not both")
        if ov.count is not None:
            if ov.count < 0:
                raise InvalidSpecError("override count must be >= 0")
            weights = {k: max(groups[k].count, 1) for k in hit}
            for k, c in _apportion(weights, ov.count).items():
                groups[k] = replace(groups[k], count=c)
        if ov.share is not None:
            if not 0 <= ov.share <= 1:
                raise InvalidSpecError("override share must lie in [0, 1]")
            rest = [k for k in groups if k not in hit]
            hw = {k: max(groups[k].count, 1) for k in hit}
            rw = {k: groups[k].count for k in rest}
            n_hit = int(round(ov.share * total))
            new = _apportion(hw, n_hit)
            if rest and sum(rw.values()) > 0:
                new.update(_apportion(rw, total - n_hit))
            for k, c in new.items():
                groups[k] = replace(groups[k], count=c)
        if ov.prevalence is not None:
            if not 0 <= ov.prevalence <= 1:
                raise InvalidSpecError("override prevalence outside [0, 1]")
            for k in hit:
                groups[k] = replace(groups[k], prevalence=ov.prevalence)
    out = tuple(groups[str(g.key)] for g in base.groups)
    if sum(g.count for g in out) == 0:
        raise InvalidSpecError("overrides leave the cohort empty")
    return replace(base, groups=out)


def generate_external_cohort(base: CohortSpec, overrides=(), embedding_jitter: float = 0.0,
                             seed: int | None = None, name: str = "external") -> Cohort:
    """Shifted cohort sharing ``base``'s embedding basis.

    Group identity directions are those of ``base`` (optionally jittered
    by ``embedding_jitter`` relative to their norm); counts and
    prevalences follow ``overrides``. Zero counts are allowed, which is how
    a cohort without pediatric patients is produced.
    """
    base.validate()
    if embedding_jitter < 0:
        raise InvalidSpecError("embedding_jitter must be non-negative")
    spec = apply_overrides(base, overrides)
    if seed is None:
        seed = stable_seed("external", base.seed, name)
    emb = _jitter(_embeddings(base), embedding_jitter, np.random.default_rng(stable_seed("jitter", seed)))
    return _sample(spec, emb, stable_seed("samples", seed), name)


def override_from_dict(d: dict) -> GroupOverride:
    return GroupOverride(GroupKey.parse(d["key"]), d.get("count"), d.get("prevalence"), d.get("share"))


def load_spec(path: str | Path) -> CohortSpec:
    d = json.loads(Path(path).read_text())
    return CohortSpec.from_dict(d.get("cohort", d))
