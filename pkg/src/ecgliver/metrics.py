"""AUROC, ROC curves and percentile-bootstrap intervals."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MAX_REDRAWS = 100


class DegenerateLabelsError(ValueError):
    """Scores need at least one positive and one negative label."""


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    labels = labels.astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == len(labels):
        raise DegenerateLabelsError(f"need both classes, got {n_pos} positives of {len(labels)}")
    return scores, labels


def _tie_groups(scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Ascending sort order and the group id (distinct score rank) of each sorted element."""
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    starts = np.empty(len(s), dtype=bool)
    starts[0] = True
    np.not_equal(s[1:], s[:-1], out=starts[1:])
    return order, np.cumsum(starts) - 1


def _grouped_auroc(pos: np.ndarray, neg: np.ndarray) -> float:
    """Mann-Whitney AUROC from per-tie-group positive/negative counts in ascending score order."""
    neg_below = np.cumsum(neg) - neg
    n_pos, n_neg = pos.sum(), neg.sum()
    # doubled to keep everything integral until the final division
    num = np.dot(pos, 2 * neg_below + neg)
    return float(num) / (2.0 * float(n_pos) * float(n_neg))


def auroc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties count one half)."""
    scores, labels = _check(scores, labels)
    order, group = _tie_groups(scores)
    y = labels[order]
    n_groups = group[-1] + 1
    pos = np.bincount(group[y], minlength=n_groups).astype(np.int64)
    neg = np.bincount(group[~y], minlength=n_groups).astype(np.int64)
    return _grouped_auroc(pos, neg)


def roc_curve(scores, labels) -> list[tuple[float, float]]:
    """ROC staircase from (0, 0) to (1, 1), one point per distinct score threshold."""
    scores, labels = _check(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    n_pos, n_neg = tp[-1], fp[-1]
    points = [(0.0, 0.0)]
    points += [(float(f) / n_neg, float(t) / n_pos) for f, t in zip(fp, tp)]
    return points


def trapezoid_area(points) -> float:
    pts = np.asarray(points, dtype=float)
    return float(np.sum(np.diff(pts[:, 0]) * (pts[1:, 1] + pts[:-1, 1]) / 2.0))


@dataclass
class BootstrapResult:
    lo: float
    hi: float
    n_iter: int
    n_used: int
    n_redrawn: int
    n_skipped: int
    level: float


def bootstrap_auroc(scores, labels, n_iter: int = 1000, level: float = 0.95, seed: int = 0) -> BootstrapResult:
    """Percentile bootstrap of AUROC over (score, label) pairs.

    Iteration ``i`` draws from its own generator seeded with ``(seed, i)``.
    Single-class resamples are redrawn up to ``MAX_REDRAWS`` times, then
    skipped.
    """
    scores, labels = _check(scores, labels)
    n = len(scores)
    order, group = _tie_groups(scores)
    y = labels[order]
    n_groups = group[-1] + 1
    # resampling in sorted space keeps each replicate O(n)
    values = []
    redrawn = skipped = 0
    for i in range(n_iter):
        rng = np.random.default_rng([seed, i])
        for attempt in range(MAX_REDRAWS + 1):
            idx = rng.integers(0, n, n)
            yi = y[idx]
            n_pos = int(yi.sum())
            if 0 < n_pos < n:
                break
            redrawn += attempt < MAX_REDRAWS
        else:
            skipped += 1
            continue
        gi = group[idx]
        pos = np.bincount(gi[yi], minlength=n_groups)
        neg = np.bincount(gi[~yi], minlength=n_groups)
        values.append(_grouped_auroc(pos, neg))
    if not values:
        raise DegenerateLabelsError("all bootstrap resamples were single-class")
    if skipped:
        log.warning("bootstrap: skipped %d of %d degenerate resamples", skipped, n_iter)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(np.asarray(values), [alpha, 1.0 - alpha])
    return BootstrapResult(float(lo), float(hi), n_iter, len(values), redrawn, skipped, level)


def bootstrap_auroc_interval(scores, labels, n_iter: int = 1000, level: float = 0.95, seed: int = 0) -> tuple[float, float]:
    r = bootstrap_auroc(scores, labels, n_iter, level, seed)
    return r.lo, r.hi


@dataclass
class EvalReport:
    target: str
    dataset_tag: str  # "internal" | "external"
    auroc: float
    interval_95: tuple[float, float]
    n_pos: int
    n_neg: int
    prevalence: float
    roc_points: list[tuple[float, float]] = field(repr=False)
    bootstrap: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["interval_95"] = list(self.interval_95)
        d["roc_points"] = [list(p) for p in self.roc_points]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["interval_95"] = tuple(d["interval_95"])
        d["roc_points"] = [tuple(p) for p in d["roc_points"]]
        return cls(**d)


def evaluate(scores, labels, target: str, dataset_tag: str, n_iter: int = 1000, seed: int = 0) -> EvalReport:
    scores, labels = _check(scores, labels)
    boot = bootstrap_auroc(scores, labels, n_iter=n_iter, seed=seed)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    return EvalReport(
        target=target,
        dataset_tag=dataset_tag,
        auroc=auroc(scores, labels),
        interval_95=(boot.lo, boot.hi),
        n_pos=n_pos,
        n_neg=n_neg,
        prevalence=n_pos / (n_pos + n_neg),
        roc_points=roc_curve(scores, labels),
        bootstrap={"n_iter": boot.n_iter, "n_used": boot.n_used, "n_redrawn": boot.n_redrawn,
                   "n_skipped": boot.n_skipped, "seed": seed, "method": "percentile"},
    )


def write_report(report: EvalReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


def read_report(path: str | Path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))


def write_roc(points, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fpr", "tpr"])
        for f, t in points:
            w.writerow([repr(float(f)), repr(float(t))])
