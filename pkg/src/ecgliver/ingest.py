"""Cohort file parsing, ICD normalization, label derivation and harmonization.

Cohort files are UTF-8 CSV with the header::

    record_id,age,sex,rr_interval,pr_interval,qrs_duration,qt_interval,
    qtc_interval,p_axis,qrs_axis,t_axis,icd_codes

``icd_codes`` is a semicolon-joined list (possibly empty); missing numeric
cells are empty strings.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, TextIO

import numpy as np

from .schema import (
    DEFAULT_SCHEMA,
    ECG_FEATURES,
    FeatureSchema,
    LabeledCohort,
    TargetCode,
    target_codes,
)

log = logging.getLogger(__name__)

COHORT_COLUMNS = ["record_id", "age", "sex", *ECG_FEATURES, "icd_codes"]

SEX_TOKENS = {"f": 0, "female": 0, "0": 0, "m": 1, "male": 1, "1": 1}


class CohortFormatError(ValueError):
    """Fatal problem with a cohort file as a whole."""


class DuplicateRecordError(CohortFormatError):
    pass


class InvalidCodeError(ValueError):
    pass


@dataclass
class RawRecord:
    record_id: str
    age: float
    sex: str
    ecg: tuple[Optional[float], ...]
    icd_codes: list[str] = field(default_factory=list)


@dataclass
class Rejection:
    row: int  # 1-based data row number (header excluded)
    record_id: str
    reason: str


@dataclass
class ParseResult:
    records: list[RawRecord]
    rejected: list[Rejection]
    source_tag: str = ""

    @property
    def n_rows(self) -> int:
        return len(self.records) + len(self.rejected)


def _fmt(v: Optional[float]) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v))


def _parse_optional(cell: str) -> Optional[float]:
    cell = cell.strip()
    if cell == "":
        return None
    value = float(cell)
    if math.isnan(value):
        return None
    return value


def parse_cohort_file(stream: TextIO | str | Path, source_tag: str = "") -> ParseResult:
    """Parse a cohort file into raw records.

    Malformed rows are rejected individually and logged; a bad header or a
    duplicated ``record_id`` is fatal.
    """
    if isinstance(stream, (str, Path)):
        with open(stream, newline="", encoding="utf-8") as fh:
            return parse_cohort_file(fh, source_tag)

    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise CohortFormatError("empty cohort file (no header)") from None
    header = [h.strip() for h in header]
    if header != COHORT_COLUMNS:
        raise CohortFormatError(f"unexpected header {header}; expected {COHORT_COLUMNS}")

    records: list[RawRecord] = []
    rejected: list[Rejection] = []
    seen: set[str] = set()
    for row_no, row in enumerate(reader, start=1):
        rid = row[0].strip() if row else ""
        if rid:
            if rid in seen:
                raise DuplicateRecordError(f"duplicate record_id {rid!r} at row {row_no}")
            seen.add(rid)
        reason = None
        if len(row) != len(COHORT_COLUMNS):
            reason = f"wrong field count ({len(row)})"
        elif not rid:
            reason = "missing record_id"
        else:
            try:
                age = _parse_optional(row[1])
                ecg = tuple(_parse_optional(c) for c in row[3:11])
            except ValueError:
                reason = "unparseable value"
            else:
                if age is None:
                    reason = "missing required value: age"
                elif not row[2].strip():
                    reason = "missing required value: sex"
        if reason is not None:
            log.info("%s row %d rejected: %s", source_tag or "cohort", row_no, reason)
            rejected.append(Rejection(row_no, rid, reason))
            continue
        codes = [c.strip() for c in row[11].split(";") if c.strip()]
        records.append(RawRecord(rid, age, row[2].strip(), ecg, codes))
    if rejected:
        log.warning("%s: %d of %d rows rejected", source_tag or "cohort", len(rejected), len(records) + len(rejected))
    return ParseResult(records, rejected, source_tag)


def write_cohort_file(records: Iterable[RawRecord], stream: TextIO | str | Path) -> None:
    if isinstance(stream, (str, Path)):
        with open(stream, "w", newline="", encoding="utf-8") as fh:
            write_cohort_file(records, fh)
        return
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(COHORT_COLUMNS)
    for r in records:
        writer.writerow([r.record_id, _fmt(r.age), r.sex, *(_fmt(v) for v in r.ecg), ";".join(r.icd_codes)])


def normalize_icd(raw: str) -> str:
    """Uppercase, strip whitespace and dots: ``" k70.30 "`` -> ``"K7030"``."""
    code = raw.strip().replace(".", "").upper()
    if not code or not code[0].isalpha() or not code[1:].isalnum():
        raise InvalidCodeError(f"invalid ICD-10-CM code: {raw!r}")
    return code


def derive_labels(codes_per_record: Sequence[Iterable[str]], targets: Sequence[str | TargetCode]) -> np.ndarray:
    """Binary matrix: 1 where any normalized code of the record starts with the target code."""
    prefixes = [t.code if isinstance(t, TargetCode) else t for t in targets]
    out = np.zeros((len(codes_per_record), len(prefixes)), dtype=np.int8)
    for i, codes in enumerate(codes_per_record):
        codes = list(codes)
        for j, p in enumerate(prefixes):
            if any(c.startswith(p) for c in codes):
                out[i, j] = 1
    return out


@dataclass
class Harmonized:
    """Canonical feature matrix plus normalized code lists, before labelling."""

    record_ids: list[str]
    X: np.ndarray
    codes: list[list[str]]
    rejected: list[Rejection]
    range_violations: dict[str, int]
    source_tag: str = ""


def harmonize(records: Sequence[RawRecord], source_tag: str = "", schema: FeatureSchema = DEFAULT_SCHEMA) -> Harmonized:
    """Map raw records onto the canonical schema.

    Sex tokens are mapped to 0/1; ECG values outside the plausible range
    become missing. Rows with an unknown sex token or an implausible age are
    rejected. Unparseable ICD codes are dropped from the record.
    """
    names = schema.names
    age_idx, sex_idx = names.index("age"), names.index("sex")
    ecg_idx = [names.index(f) for f in ECG_FEATURES]
    ranges = np.array([f.plausible_range for f in schema.features])

    rows, ids, codes, rejected = [], [], [], []
    violations = {n: 0 for n in names}
    dropped_codes = 0
    for row_no, r in enumerate(records, start=1):
        sex = SEX_TOKENS.get(r.sex.strip().lower())
        if sex is None:
            rejected.append(Rejection(row_no, r.record_id, f"unmappable sex token {r.sex!r}"))
            continue
        lo, hi = ranges[age_idx]
        if not lo <= r.age <= hi:
            violations["age"] += 1
            rejected.append(Rejection(row_no, r.record_id, f"age {r.age} outside plausible range"))
            continue
        x = np.full(len(names), np.nan)
        x[age_idx] = r.age
        x[sex_idx] = sex
        for j, v in zip(ecg_idx, r.ecg):
            if v is None:
                continue
            lo, hi = ranges[j]
            if lo <= v <= hi:
                x[j] = v
            else:
                violations[names[j]] += 1
        norm = []
        for c in r.icd_codes:
            try:
                norm.append(normalize_icd(c))
            except InvalidCodeError:
                dropped_codes += 1
        rows.append(x)
        ids.append(r.record_id)
        codes.append(norm)

    n_viol = sum(violations.values())
    if n_viol:
        log.warning("%s: %d out-of-range values set to missing %s", source_tag or "cohort", n_viol,
                    {k: v for k, v in violations.items() if v})
    if dropped_codes:
        log.warning("%s: dropped %d invalid ICD codes", source_tag or "cohort", dropped_codes)
    for rej in rejected:
        log.info("%s record %s rejected: %s", source_tag or "cohort", rej.record_id, rej.reason)
    X = np.vstack(rows) if rows else np.empty((0, len(names)))
    return Harmonized(ids, X, codes, rejected, violations, source_tag)


def build_cohort(records: Sequence[RawRecord], targets: Sequence[str | TargetCode], source_tag: str = "") -> LabeledCohort:
    h = harmonize(records, source_tag)
    targets = target_codes(targets)
    labels = derive_labels(h.codes, targets)
    cohort = LabeledCohort(h.record_ids, h.X, labels, targets, source=source_tag)
    cohort.meta["rejected"] = len(h.rejected)
    cohort.meta["range_violations"] = {k: v for k, v in h.range_violations.items() if v}
    return cohort


def load_cohort(path: str | Path, targets: Sequence[str | TargetCode], source_tag: str = "") -> LabeledCohort:
    parsed = parse_cohort_file(path, source_tag)
    cohort = build_cohort(parsed.records, targets, source_tag)
    cohort.meta["parse_rejected"] = len(parsed.rejected)
    return cohort


# Labeled cohort serialization: features, label bits and fold in one CSV.

def write_labeled_cohort(cohort: LabeledCohort, stream: TextIO | str | Path) -> None:
    if isinstance(stream, (str, Path)):
        with open(stream, "w", newline="", encoding="utf-8") as fh:
            write_labeled_cohort(cohort, fh)
        return
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["record_id", *cohort.schema.names, *(f"label_{c}" for c in cohort.codes), "fold"])
    for i, rid in enumerate(cohort.record_ids):
        fold = "" if cohort.fold_of is None else str(int(cohort.fold_of[i]))
        writer.writerow([rid, *(_fmt(v) for v in cohort.X[i]), *(str(int(b)) for b in cohort.labels[i]), fold])


def read_labeled_cohort(stream: TextIO | str | Path, schema: FeatureSchema = DEFAULT_SCHEMA) -> LabeledCohort:
    if isinstance(stream, (str, Path)):
        with open(stream, newline="", encoding="utf-8") as fh:
            return read_labeled_cohort(fh, schema)
    reader = csv.reader(stream)
    header = next(reader)
    p = len(schema)
    if header[0] != "record_id" or header[1:1 + p] != schema.names or header[-1] != "fold":
        raise CohortFormatError(f"unexpected labeled-cohort header {header}")
    codes = [h[len("label_"):] for h in header[1 + p:-1]]
    ids, X, labels, folds = [], [], [], []
    for row in reader:
        ids.append(row[0])
        X.append([np.nan if c == "" else float(c) for c in row[1:1 + p]])
        labels.append([int(c) for c in row[1 + p:-1]])
        folds.append(row[-1])
    has_folds = bool(folds) and all(f != "" for f in folds)
    return LabeledCohort(
        ids,
        np.array(X, dtype=float).reshape(len(ids), p),
        np.array(labels, dtype=np.int8).reshape(len(ids), len(codes)),
        target_codes(codes),
        schema,
        fold_of=np.array([int(f) for f in folds]) if has_folds else None,
    )


def cohort_to_text(cohort: LabeledCohort) -> str:
    buf = io.StringIO()
    write_labeled_cohort(cohort, buf)
    return buf.getvalue()
