"""Cohorts, demographic groups and patient-grouped split planning."""

from __future__ import annotations

import csv
import enum
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np


class InvalidInputError(ValueError):
    pass


class InfeasibleSplitError(ValueError):
    pass


class Sex(str, enum.Enum):
    MALE = "M"
    FEMALE = "F"


class AgeBin(enum.IntEnum):
    B0_20 = 0
    B20_40 = 1
    B40_60 = 2
    B60_80 = 3
    B80_PLUS = 4

    @property
    def lower(self) -> float:
        return 20.0 * self.value

    @property
    def upper(self) -> float:
        return math.inf if self is AgeBin.B80_PLUS else 20.0 * (self.value + 1)

    @property
    def label(self) -> str:
        return "80+Y" if self is AgeBin.B80_PLUS else f"{int(self.lower)}-{int(self.upper)}Y"


def assign_age_bin(age_years: float) -> AgeBin:
    """Half-open bins [0,20), [20,40), [40,60), [60,80), [80, inf)."""
    if not age_years >= 0:  # also rejects NaN
        raise InvalidInputError(f"age must be non-negative, got {age_years!r}")
    return AgeBin(min(int(age_years // 20), 4))


def age_bin_codes(age_years) -> np.ndarray:
    """Vectorised :func:`assign_age_bin` returning integer bin codes."""
    return np.minimum(np.asarray(age_years, dtype=float) // 20, 4).astype(int)


@dataclass(frozen=True)
class DemographicProfile:
    sex: Sex
    age_years: float

    def __post_init__(self):
        if not isinstance(self.sex, Sex):
            object.__setattr__(self, "sex", Sex(self.sex))
        if not self.age_years >= 0:
            raise InvalidInputError(f"age must be non-negative, got {self.age_years!r}")

    @property
    def age_bin(self) -> AgeBin:
        return assign_age_bin(self.age_years)


@dataclass(frozen=True)
class GroupKey:
    """A demographic selector.

    ``sex`` and ``age_bin`` are both optional: neither set is the ``All``
    key, one set is a sex or age group, both set is an intersection.
    Keys render as the short labels used in reports ("F", "40-60Y",
    "M 0-20Y", "All") and :meth:`parse` inverts that.
    """

    sex: Sex | None = None
    age_bin: AgeBin | None = None

    @classmethod
    def all(cls) -> GroupKey:
        return cls()

    @property
    def kind(self) -> str:
        if self.sex is None and self.age_bin is None:
            return "all"
        if self.age_bin is None:
            return "sex"
        if self.sex is None:
            return "age"
        return "intersection"

    @property
    def is_all(self) -> bool:
        return self.kind == "all"

    def matches(self, sex: Sex, age_bin: AgeBin) -> bool:
        return (self.sex is None or self.sex == sex) and (self.age_bin is None or self.age_bin == age_bin)

    def mask(self, sex: np.ndarray, age_bin: np.ndarray) -> np.ndarray:
        """Vectorised :meth:`matches` over arrays of sex codes ("M"/"F") and bin ints."""
        m = np.ones(len(sex), dtype=bool)
        if self.sex is not None:
            m &= sex == self.sex.value
        if self.age_bin is not None:
            m &= age_bin == int(self.age_bin)
        return m

    def __str__(self) -> str:
        if self.is_all:
            return "All"
        parts = []
        if self.sex is not None:
            parts.append(self.sex.value)
        if self.age_bin is not None:
            parts.append(self.age_bin.label)
        return " ".join(parts)

    @classmethod
    def parse(cls, text: str) -> GroupKey:
        text = text.strip()
        if text == "All":
            return cls()
        sex = None
        age = None
        for tok in text.split():
            if tok in ("M", "F"):
                if sex is not None:
                    raise InvalidInputError(f"bad group label {text!r}")
                sex = Sex(tok)
            else:
                match = [b for b in AgeBin if b.label == tok]
                if not match or age is not None:
                    raise InvalidInputError(f"bad group label {text!r}")
                age = match[0]
        if sex is None and age is None:
            raise InvalidInputError(f"bad group label {text!r}")
        return cls(sex, age)


def group_matches(sample: Sample, key: GroupKey) -> bool:
    d = sample.demographics
    return key.matches(d.sex, d.age_bin)


def enumerate_groups() -> list[GroupKey]:
    """The 17 groups: M, F, five age bins, then M x bins and F x bins."""
    groups = [GroupKey(sex=s) for s in Sex]
    groups += [GroupKey(age_bin=b) for b in AgeBin]
    groups += [GroupKey(s, b) for s in Sex for b in AgeBin]
    return groups


def intersection_groups() -> list[GroupKey]:
    return [GroupKey(s, b) for s in Sex for b in AgeBin]


@dataclass(frozen=True)
class Sample:
    patient_id: str
    features: np.ndarray
    label: int
    demographics: DemographicProfile


@dataclass(frozen=True, eq=False)
class Cohort:
    """Column-oriented cohort.

    Samples are stored as parallel arrays; ``samples`` materialises
    :class:`Sample` views for code that wants per-record access.
    """

    patient_ids: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    sex: np.ndarray
    age_years: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=float)
        if feats.ndim != 2:
            raise InvalidInputError("features must be a 2-D array")
        n = feats.shape[0]
        labels = np.asarray(self.labels, dtype=np.int8)
        sex = np.asarray(self.sex, dtype="<U1")
        age = np.asarray(self.age_years, dtype=float)
        pids = np.asarray(self.patient_ids).astype(str)
        if not (len(labels) == len(sex) == len(age) == len(pids) == n):
            raise InvalidInputError("cohort columns have mismatched lengths")
        if n and not np.isin(labels, (0, 1)).all():
            raise InvalidInputError("labels must be binary")
        if n and not np.isin(sex, ("M", "F")).all():
            raise InvalidInputError("sex must be 'M' or 'F'")
        if n and not (age >= 0).all():
            raise InvalidInputError("ages must be non-negative")
        for name, arr in (("features", feats), ("labels", labels), ("sex", sex),
                          ("age_years", age), ("patient_ids", pids)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def age_bins(self) -> np.ndarray:
        return age_bin_codes(self.age_years)

    @property
    def samples(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self.sample(i)

    def sample(self, i: int) -> Sample:
        return Sample(
            patient_id=str(self.patient_ids[i]),
            features=self.features[i],
            label=int(self.labels[i]),
            demographics=DemographicProfile(Sex(self.sex[i]), float(self.age_years[i])),
        )

    def group_mask(self, key: GroupKey) -> np.ndarray:
        return key.mask(self.sex, self.age_bins)

    def subset(self, idx: np.ndarray) -> Cohort:
        return Cohort(self.patient_ids[idx], self.features[idx], self.labels[idx],
                      self.sex[idx], self.age_years[idx], self.provenance)

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], provenance: str = "") -> Cohort:
        if not samples:
            raise InvalidInputError("empty sample list")
        dims = {len(s.features) for s in samples}
        if len(dims) != 1:
            raise InvalidInputError(f"inconsistent feature lengths {sorted(dims)}")
        return cls(
            patient_ids=np.array([s.patient_id for s in samples]),
            features=np.vstack([np.asarray(s.features, dtype=float) for s in samples]),
            labels=np.array([s.label for s in samples]),
            sex=np.array([Sex(s.demographics.sex).value for s in samples]),
            age_years=np.array([s.demographics.age_years for s in samples]),
            provenance=provenance,
        )

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.patient_ids, self.features, self.labels, self.sex, self.age_years):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    # -- serialisation ------------------------------------------------------

    def to_csv(self, path: str | Path) -> None:
        header = ["patient_id", "sex", "age_years", "label"] + [f"f{j}" for j in range(self.feature_dim)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for i in range(len(self)):
                w.writerow([self.patient_ids[i], self.sex[i], repr(float(self.age_years[i])),
                            int(self.labels[i])] + [repr(float(v)) for v in self.features[i]])

    @classmethod
    def from_csv(cls, path: str | Path, provenance: str | None = None) -> Cohort:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        fcols = [j for j, h in enumerate(header) if h.startswith("f") and h[1:].isdigit()]
        col = {h: j for j, h in enumerate(header)}
        return cls(
            patient_ids=np.array([r[col["patient_id"]] for r in body]),
            features=np.array([[float(r[j]) for j in fcols] for r in body]).reshape(len(body), len(fcols)),
            labels=np.array([int(r[col["label"]]) for r in body]),
            sex=np.array([r[col["sex"]] for r in body]),
            age_years=np.array([float(r[col["age_years"]]) for r in body]),
            provenance=provenance if provenance is not None else Path(path).name,
        )

    def to_json(self) -> str:
        return json.dumps({
            "provenance": self.provenance,
            "feature_dim": self.feature_dim,
            "samples": [
                {"patient_id": str(self.patient_ids[i]), "sex": str(self.sex[i]),
                 "age_years": float(self.age_years[i]), "label": int(self.labels[i]),
                 "features": self.features[i].tolist()}
                for i in range(len(self))
            ],
        })

    @classmethod
    def from_json(cls, text: str) -> Cohort:
        d = json.loads(text)
        s = d["samples"]
        return cls(
            patient_ids=np.array([r["patient_id"] for r in s]),
            features=np.array([r["features"] for r in s], dtype=float).reshape(len(s), d["feature_dim"]),
            labels=np.array([r["label"] for r in s]),
            sex=np.array([r["sex"] for r in s]),
            age_years=np.array([r["age_years"] for r in s]),
            provenance=d.get("provenance", ""),
        )


class Partition(str, enum.Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


_PART_CODE = {Partition.TRAIN: 0, Partition.VAL: 1, Partition.TEST: 2}


@dataclass(frozen=True, eq=False)
class SplitPlan:
    """Per-fold partition codes: ``assignments[k, i]`` is 0/1/2 for train/val/test."""

    assignments: np.ndarray
    proportions: tuple[float, float, float]
    seed: int = 0

    def __post_init__(self):
        a = np.asarray(self.assignments, dtype=np.int8)
        a.setflags(write=False)
        object.__setattr__(self, "assignments", a)

    @property
    def fold_count(self) -> int:
        return self.assignments.shape[0]

    def indices(self, fold: int, part: Partition | str) -> np.ndarray:
        code = _PART_CODE[Partition(part)]
        return np.flatnonzero(self.assignments[fold] == code)

    def partition_of(self, fold: int, index: int) -> Partition:
        return [Partition.TRAIN, Partition.VAL, Partition.TEST][self.assignments[fold, index]]

    def __eq__(self, other):
        return (isinstance(other, SplitPlan) and self.proportions == other.proportions
                and np.array_equal(self.assignments, other.assignments))

    def to_json(self) -> str:
        return json.dumps({
            "proportions": list(self.proportions),
            "seed": self.seed,
            "folds": [
                {p.value: self.indices(k, p).tolist() for p in Partition}
                for k in range(self.fold_count)
            ],
        })

    @classmethod
    def from_json(cls, text: str) -> SplitPlan:
        d = json.loads(text)
        n = sum(len(v) for v in d["folds"][0].values())
        a = np.empty((len(d["folds"]), n), dtype=np.int8)
        for k, fold in enumerate(d["folds"]):
            for p in Partition:
                a[k, fold[p.value]] = _PART_CODE[p]
        return cls(a, tuple(d["proportions"]), d.get("seed", 0))


def make_splits(cohort: Cohort, fold_count: int, proportions=(0.7, 0.1, 0.2), seed: int = 0) -> SplitPlan:
    """Patient-grouped splits with one test set shared by all folds.

    The test patients are drawn once; train/val are re-drawn from the
    remaining patients for each fold. Proportions are applied to patient
    counts and every sample follows its patient.
    """
    proportions = tuple(float(p) for p in proportions)
    if len(proportions) != 3 or any(p < 0 for p in proportions) or abs(sum(proportions) - 1) > 1e-9:
        raise InvalidInputError(f"proportions must be a non-negative triple summing to 1, got {proportions}")
    if fold_count < 1:
        raise InvalidInputError("fold_count must be >= 1")
    patients, inverse = np.unique(cohort.patient_ids, return_inverse=True)
    n_pat = len(patients)
    if n_pat < fold_count:
        raise InfeasibleSplitError(f"{n_pat} patients cannot fill {fold_count} folds")

    n_test = int(round(proportions[2] * n_pat))
    n_val = int(round(proportions[1] * n_pat))
    rng = np.random.default_rng([seed & (2**64 - 1), 0])
    perm = rng.permutation(n_pat)
    test_pat, rest = perm[:n_test], perm[n_test:]

    plan = np.empty((fold_count, n_pat), dtype=np.int8)
    for k in range(fold_count):
        fold_rng = np.random.default_rng([seed & (2**64 - 1), k + 1])
        order = fold_rng.permutation(rest)
        plan[k, order[:n_val]] = 1
        plan[k, order[n_val:]] = 0
        plan[k, test_pat] = 2
    return SplitPlan(plan[:, inverse], proportions, seed)


def stable_seed(*parts) -> int:
    """64-bit seed from a canonical string encoding of ``parts``.

    Floats are encoded with ``repr`` so 0.1 and 0.10000000000000002 differ;
    everything else via ``str``.
    """
    enc = "|".join(repr(p) if isinstance(p, float) else str(p) for p in parts)
    return int.from_bytes(hashlib.blake2b(enc.encode(), digest_size=8).digest(), "little")
