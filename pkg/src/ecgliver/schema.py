"""Shared data model: feature schema, feature vectors, target codes and cohorts."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

ICD_PATTERN = re.compile(r"^[A-Z][0-9]+$")


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str  # "continuous" | "binary"
    unit: str  # "milliseconds" | "degrees" | "years" | "dimensionless"
    plausible_range: tuple[float, float]
    required: bool = False


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple[FeatureSpec, ...]

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate feature names in schema: {names}")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    def index(self, name: str) -> int:
        return self.names.index(name)

    @property
    def fingerprint(self) -> str:
        """Short stable digest of names, kinds, units and ranges."""
        text = "|".join(
            f"{f.name}:{f.kind}:{f.unit}:{f.plausible_range[0]!r}:{f.plausible_range[1]!r}"
            for f in self.features
        )
        return hashlib.sha256(text.encode()).hexdigest()[:16]


_MS = (0.0, 4000.0)
_DEG = (-180.0, 360.0)

ECG_FEATURES = (
    "rr_interval",
    "pr_interval",
    "qrs_duration",
    "qt_interval",
    "qtc_interval",
    "p_axis",
    "qrs_axis",
    "t_axis",
)

DEFAULT_SCHEMA = FeatureSchema(
    (
        FeatureSpec("rr_interval", "continuous", "milliseconds", _MS),
        FeatureSpec("pr_interval", "continuous", "milliseconds", _MS),
        FeatureSpec("qrs_duration", "continuous", "milliseconds", _MS),
        FeatureSpec("qt_interval", "continuous", "milliseconds", _MS),
        FeatureSpec("qtc_interval", "continuous", "milliseconds", _MS),
        FeatureSpec("p_axis", "continuous", "degrees", _DEG),
        FeatureSpec("qrs_axis", "continuous", "degrees", _DEG),
        FeatureSpec("t_axis", "continuous", "degrees", _DEG),
        FeatureSpec("age", "continuous", "years", (18.0, 120.0), required=True),
        FeatureSpec("sex", "binary", "dimensionless", (0.0, 1.0), required=True),
    )
)

FEATURE_NAMES = DEFAULT_SCHEMA.names


@dataclass(frozen=True)
class TargetCode:
    code: str
    description: str = ""

    def __post_init__(self):
        if not ICD_PATTERN.match(self.code):
            raise ValueError(f"not a normalized ICD-10-CM code: {self.code!r}")

    def __str__(self) -> str:
        return self.code


CANONICAL_TARGETS = (
    TargetCode("K70", "Alcoholic liver disease"),
    TargetCode("K703", "Alcoholic cirrhosis of liver"),
    TargetCode("K7030", "Alcoholic cirrhosis of liver without ascites"),
    TargetCode("K72", "Hepatic failure, not elsewhere classified"),
    TargetCode("K729", "Hepatic failure, unspecified"),
    TargetCode("K7290", "Hepatic failure, unspecified without coma"),
)
CANONICAL_CODES = tuple(t.code for t in CANONICAL_TARGETS)


def target_codes(codes: Sequence[str | TargetCode]) -> list[TargetCode]:
    known = {t.code: t for t in CANONICAL_TARGETS}
    out = []
    for c in codes:
        if isinstance(c, TargetCode):
            out.append(c)
        else:
            out.append(known.get(c, TargetCode(c)))
    return out


@dataclass(frozen=True)
class FeatureVector:
    """One patient record aligned to a schema; ``None`` marks a missing value."""

    values: tuple[Optional[float], ...]

    @classmethod
    def from_array(cls, row) -> "FeatureVector":
        return cls(tuple(None if np.isnan(v) else float(v) for v in row))

    def to_array(self) -> np.ndarray:
        return np.array([np.nan if v is None else v for v in self.values], dtype=float)


@dataclass(frozen=True)
class Violation:
    feature: str
    value: Optional[float]
    rule: str


def validate_vector(v: FeatureVector, schema: FeatureSchema = DEFAULT_SCHEMA) -> list[Violation]:
    if len(v.values) != len(schema):
        raise ValueError(f"vector has {len(v.values)} values, schema has {len(schema)}")
    out = []
    for spec, value in zip(schema.features, v.values):
        if value is None or (isinstance(value, float) and np.isnan(value)):
            if spec.required:
                out.append(Violation(spec.name, None, "required"))
            continue
        lo, hi = spec.plausible_range
        if not lo <= value <= hi:
            out.append(Violation(spec.name, value, f"outside plausible range [{lo}, {hi}]"))
        elif spec.kind == "binary" and value not in (0.0, 1.0):
            out.append(Violation(spec.name, value, "binary feature must be 0 or 1"))
    return out


@dataclass
class LabeledCohort:
    """Feature matrix plus per-target binary labels and fold assignment.

    ``X`` holds NaN for missing values. ``fold_of`` is ``None`` until folds
    have been assigned.
    """

    record_ids: list[str]
    X: np.ndarray
    labels: np.ndarray
    targets: list[TargetCode]
    schema: FeatureSchema = DEFAULT_SCHEMA
    fold_of: Optional[np.ndarray] = None
    source: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.record_ids)
        self.X = np.asarray(self.X, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int8).reshape(n, len(self.targets))
        if self.X.shape != (n, len(self.schema)):
            raise ValueError(f"X has shape {self.X.shape}, expected ({n}, {len(self.schema)})")
        if self.fold_of is not None:
            self.fold_of = np.asarray(self.fold_of, dtype=np.int64)
            if self.fold_of.shape != (n,):
                raise ValueError("fold_of length must equal sample count")

    def __len__(self) -> int:
        return len(self.record_ids)

    @property
    def codes(self) -> list[str]:
        return [t.code for t in self.targets]

    def label(self, code: str) -> np.ndarray:
        return self.labels[:, self.codes.index(code)]

    def vector(self, i: int) -> FeatureVector:
        return FeatureVector.from_array(self.X[i])

    def subset(self, mask) -> "LabeledCohort":
        idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask)
        return LabeledCohort(
            record_ids=[self.record_ids[i] for i in idx],
            X=self.X[idx],
            labels=self.labels[idx],
            targets=list(self.targets),
            schema=self.schema,
            fold_of=None if self.fold_of is None else self.fold_of[idx],
            source=self.source,
        )

    def hierarchy_violations(self) -> int:
        """Count (sample, child) pairs labelled positive whose prefix parent is negative."""
        codes = self.codes
        bad = 0
        for j, child in enumerate(codes):
            for k, parent in enumerate(codes):
                if k != j and child.startswith(parent):
                    bad += int(np.sum((self.labels[:, j] == 1) & (self.labels[:, k] == 0)))
        return bad
