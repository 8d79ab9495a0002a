"""Deterministic stratified fold assignment (18:1:1 train/validation/test by default)."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import TextIO

import numpy as np

from .schema import LabeledCohort


@dataclass(frozen=True)
class FoldPlan:
    n_folds: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.n_folds < 2:
            raise ValueError("n_folds must be >= 2")

    @property
    def val_fold(self) -> int:
        return self.n_folds - 2

    @property
    def test_fold(self) -> int:
        return self.n_folds - 1

    @property
    def train_folds(self) -> frozenset[int]:
        return frozenset(range(self.n_folds - 2))


def age_quartile_edges(age: np.ndarray) -> np.ndarray:
    return np.quantile(age, [0.25, 0.5, 0.75])


def age_quartile(age, edges: np.ndarray) -> np.ndarray:
    return np.searchsorted(edges, age, side="right")


def stratum_keys(cohort: LabeledCohort) -> list[tuple]:
    """Per-sample key ``(label bits, age quartile 0-3, sex)``."""
    age = cohort.X[:, cohort.schema.index("age")]
    sex = cohort.X[:, cohort.schema.index("sex")]
    q = age_quartile(age, age_quartile_edges(age))
    bits = ["".join(str(int(b)) for b in row) for row in cohort.labels]
    return [(b, int(qi), int(s)) for b, qi, s in zip(bits, q, sex)]


def stratum_key(cohort: LabeledCohort, i: int) -> tuple:
    return stratum_keys(cohort)[i]


def _key_seed(seed: int, key: tuple) -> list[int]:
    # stable integer words for the generator; never Python's salted hash()
    words = [seed & 0xFFFFFFFF, (seed >> 32) & 0xFFFFFFFF]
    for part in key:
        if isinstance(part, str):
            words.append(int(part, 2) if part else 0)
            words.append(len(part))
        else:
            words.append(int(part) + 1)
    return words


def assign_folds(cohort: LabeledCohort, plan: FoldPlan = FoldPlan()) -> np.ndarray:
    """Shuffle each stratum with a key-seeded generator and deal round-robin.

    Strata with fewer members than ``n_folds`` are pooled into a fallback
    stratum keyed by (any positive label, sex). Dealing continues the
    round-robin position from one stratum to the next, so fold sizes differ by
    at most one.
    """
    n = len(cohort)
    if n == 0:
        raise ValueError("cannot assign folds to an empty cohort")
    keys = stratum_keys(cohort)
    groups: dict[tuple, list[int]] = {}
    for i, k in enumerate(keys):
        groups.setdefault(k, []).append(i)

    final: dict[tuple, list[int]] = {}
    for k, members in groups.items():
        if len(members) >= plan.n_folds:
            final[("s", *k)] = members
        else:
            fk = ("f", "1" if "1" in k[0] else "0", k[2])
            final.setdefault(fk, []).extend(members)

    fold_of = np.empty(n, dtype=np.int64)
    pos = 0
    for k in sorted(final):
        members = np.array(sorted(final[k]), dtype=np.int64)
        kind = 0 if k[0] == "s" else 1
        rng = np.random.default_rng(_key_seed(plan.seed, (kind, *k[1:])))
        members = members[rng.permutation(len(members))]
        fold_of[members] = (pos + np.arange(len(members))) % plan.n_folds
        pos = (pos + len(members)) % plan.n_folds
    return fold_of


def n_strata(cohort: LabeledCohort) -> int:
    return len(set(stratum_keys(cohort)))


def write_fold_file(record_ids, fold_of, stream: TextIO | str | Path) -> None:
    if isinstance(stream, (str, Path)):
        with open(stream, "w", newline="", encoding="utf-8") as fh:
            write_fold_file(record_ids, fold_of, fh)
        return
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(["record_id", "fold_index"])
    for rid, f in zip(record_ids, fold_of):
        w.writerow([rid, int(f)])


def read_fold_file(stream: TextIO | str | Path) -> dict[str, int]:
    if isinstance(stream, (str, Path)):
        with open(stream, newline="", encoding="utf-8") as fh:
            return read_fold_file(fh)
    r = csv.reader(stream)
    header = next(r)
    if header != ["record_id", "fold_index"]:
        raise ValueError(f"unexpected fold file header {header}")
    return {row[0]: int(row[1]) for row in r}
