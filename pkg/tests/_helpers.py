"""Shared fixtures-by-function for the test suite."""

from __future__ import annotations

import numpy as np

from ecgliver.schema import LabeledCohort, target_codes
from ecgliver.synth import SynthSpec, generate_arrays


def synthetic_cohort(spec: SynthSpec) -> LabeledCohort:
    """In-memory cohort straight from the generator arrays (no file round trip)."""
    draw = generate_arrays(spec)
    ids = [f"{spec.id_prefix}{i:07d}" for i in range(len(draw.X))]
    c = LabeledCohort(ids, draw.X, draw.labels, target_codes(draw.codes), source="synthetic")
    c.meta["probs"] = draw.probs
    return c


def role_masks(fold_of: np.ndarray, plan):
    train = np.isin(fold_of, sorted(plan.train_folds))
    return train, fold_of == plan.val_fold, fold_of == plan.test_fold


ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    """Store and print one acceptance verdict line."""
    line = f"{'PASS' if passed else 'FAIL'} criterion {criterion:2d}: {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
