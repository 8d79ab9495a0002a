"""Path-dependent TreeSHAP for :class:`~ecgliver.gbdt.TreeEnsemble`, plus an exact oracle.

Absent features are marginalized with node cover ratios. The polynomial-time
recursion runs once per tree for a whole batch of inputs: the traversal
order depends only on the tree, so the per-sample "one fractions" and
permutation weights are carried as arrays over the batch.

Attributions are in margin (log-odds) units. A missing input value routes by
the node's default direction and is attributed like any present value.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .gbdt import Tree, TreeEnsemble
from .schema import DEFAULT_SCHEMA, FeatureSchema

MAX_BRUTE_FORCE_FEATURES = 15


class ModelIntegrityError(ValueError):
    pass


@dataclass
class AttributionMatrix:
    base_value: float
    values: np.ndarray  # samples x features
    schema_fingerprint: str
    target: str = ""

    def margins(self) -> np.ndarray:
        return self.base_value + self.values.sum(axis=1)


def _check_covers(tree: Tree) -> None:
    if not np.all(tree.cover > 0):
        raise ModelIntegrityError("tree has a node with non-positive cover")


def tree_expectation(tree: Tree) -> float:
    """Cover-weighted expected output of one tree."""
    _check_covers(tree)

    def e(i):
        if tree.left[i] < 0:
            return float(tree.value[i])
        l, r = tree.left[i], tree.right[i]
        return (tree.cover[l] * e(l) + tree.cover[r] * e(r)) / tree.cover[i]

    return e(0)


def expected_value(ensemble: TreeEnsemble) -> float:
    return float(ensemble.base_score + sum(tree_expectation(t) for t in ensemble.trees))


def _goes_left(tree: Tree, node: int, X: np.ndarray) -> np.ndarray:
    x = X[:, tree.feature[node]]
    return np.where(np.isnan(x), tree.default_left[node], x < tree.threshold[node])


def _extend(path, pz: float, po: np.ndarray, pi: int, n: int):
    feats, zeros, ones, w = path
    depth = len(feats)
    feats = feats + [pi]
    zeros = zeros + [pz]
    ones = ones + [po]
    w = w + [np.ones(n) if depth == 0 else np.zeros(n)]
    for i in range(depth - 1, -1, -1):
        w[i + 1] = w[i + 1] + po * w[i] * ((i + 1) / (depth + 1))
        w[i] = pz * w[i] * ((depth - i) / (depth + 1))
    return feats, zeros, ones, w


def _unwind(path, k: int):
    """Remove path element ``k``, undoing its contribution to the weights."""
    feats, zeros, ones, w = path
    depth = len(feats) - 1
    o, z = ones[k], zeros[k]
    hot = o != 0
    safe_o = np.where(hot, o, 1.0)
    nxt = w[depth]
    w = list(w[:depth])
    for j in range(depth - 1, -1, -1):
        via_one = nxt * (depth + 1) / ((j + 1) * safe_o)
        via_zero = w[j] * (depth + 1) / (z * (depth - j))
        nxt = np.where(hot, w[j] - via_one * z * ((depth - j) / (depth + 1)), nxt)
        w[j] = np.where(hot, via_one, via_zero)
    del feats[k:k + 1], zeros[k:k + 1], ones[k:k + 1]
    return feats, zeros, ones, w


def _unwound_sum(path, k: int) -> np.ndarray:
    """Total permutation weight if element ``k`` were unwound."""
    _, zeros, ones, w = path
    depth = len(w) - 1
    o, z = ones[k], zeros[k]
    hot = o != 0
    safe_o = np.where(hot, o, 1.0)
    nxt = w[depth]
    total = np.zeros_like(nxt)
    for j in range(depth - 1, -1, -1):
        via_one = nxt * (depth + 1) / ((j + 1) * safe_o)
        via_zero = w[j] / (z * ((depth - j) / (depth + 1)))
        total = total + np.where(hot, via_one, via_zero)
        nxt = np.where(hot, w[j] - via_one * z * ((depth - j) / (depth + 1)), nxt)
    return total


def _tree_shap_batch(tree: Tree, X: np.ndarray, phi: np.ndarray) -> None:
    _check_covers(tree)
    n = X.shape[0]

    def recurse(node, path, pz, po, pi):
        path = _extend(path, pz, po, pi, n)
        if tree.left[node] < 0:
            feats, zeros, ones, _ = path
            v = tree.value[node]
            for k in range(1, len(feats)):
                w = _unwound_sum(path, k)
                phi[:, feats[k]] += w * (ones[k] - zeros[k]) * v
            return
        f = int(tree.feature[node])
        left, right = tree.left[node], tree.right[node]
        hot_left = _goes_left(tree, node, X)
        iz, io = 1.0, np.ones(n)
        feats = path[0]
        if f in feats[1:]:
            k = feats.index(f, 1)
            iz, io = path[1][k], path[2][k]
            path = _unwind((list(path[0]), list(path[1]), list(path[2]), path[3]), k)
        c = tree.cover[node]
        recurse(left, path, iz * tree.cover[left] / c, io * hot_left, f)
        recurse(right, path, iz * tree.cover[right] / c, io * ~hot_left, f)

    recurse(0, ([], [], [], []), 1.0, np.ones(n), -1)


def tree_shap(ensemble: TreeEnsemble, X, schema: Optional[FeatureSchema] = None,
              batch_size: int = 4096) -> tuple[np.ndarray, float]:
    """Exact path-dependent Shapley values; returns ``(phi, base_value)``.

    ``phi`` has shape (n_samples, n_features), or (n_features,) for a single
    input vector. ``base_value + phi.sum(-1)`` equals the predicted margin.
    """
    single = np.ndim(X) == 1
    X = ensemble._check(X, schema)
    phi = np.zeros(X.shape)
    for start in range(0, X.shape[0], batch_size):
        block = X[start:start + batch_size]
        out = np.zeros(block.shape)
        for t in ensemble.trees:
            # per-tree buffer: the ensemble result is exactly the sum of tree results
            part = np.zeros(block.shape)
            _tree_shap_batch(t, block, part)
            out += part
        phi[start:start + batch_size] = out
    base = expected_value(ensemble)
    return (phi[0] if single else phi), base


def explain(ensemble: TreeEnsemble, X, schema: FeatureSchema = DEFAULT_SCHEMA) -> AttributionMatrix:
    phi, base = tree_shap(ensemble, np.atleast_2d(np.asarray(X, dtype=float)), schema)
    return AttributionMatrix(base, phi, schema.fingerprint, ensemble.target)


def _leaf_paths(tree: Tree, x: np.ndarray):
    """For each leaf: value and the list of (feature, x_goes_this_way, cover_ratio) along its path."""
    out = []

    def walk(i, steps):
        if tree.left[i] < 0:
            out.append((float(tree.value[i]), steps))
            return
        f = int(tree.feature[i])
        v = x[f]
        left = bool(tree.default_left[i]) if math.isnan(v) else bool(v < tree.threshold[i])
        c = tree.cover[i]
        walk(tree.left[i], steps + [(f, left, tree.cover[tree.left[i]] / c)])
        walk(tree.right[i], steps + [(f, not left, tree.cover[tree.right[i]] / c)])

    walk(0, [])
    return out


def subset_values(ensemble: TreeEnsemble, x) -> np.ndarray:
    """``v(S)`` for every feature subset ``S`` (bitmask index), path-dependent marginalization."""
    x = np.asarray(x, dtype=float).ravel()
    M = len(x)
    masks = np.arange(1 << M)
    v = np.full(1 << M, float(ensemble.base_score))
    for t in ensemble.trees:
        _check_covers(t)
        for value, steps in _leaf_paths(t, x):
            weight = np.ones(1 << M)
            for f, follows, ratio in steps:
                in_s = (masks >> f) & 1 == 1
                weight *= np.where(in_s, 1.0 if follows else 0.0, ratio)
            v += value * weight
    return v


def brute_force_shap(ensemble: TreeEnsemble, x) -> np.ndarray:
    """Shapley values by enumerating all ``2**M`` feature subsets."""
    x = np.asarray(x, dtype=float).ravel()
    M = len(x)
    if M > MAX_BRUTE_FORCE_FEATURES:
        raise ValueError(f"brute force limited to {MAX_BRUTE_FORCE_FEATURES} features, got {M}")
    v = subset_values(ensemble, x)
    masks = np.arange(1 << M)
    size = np.array([bin(s).count("1") for s in masks])
    weights = np.array([math.factorial(k) * math.factorial(M - k - 1) / math.factorial(M) for k in range(M)])
    phi = np.zeros(M)
    for j in range(M):
        bit = 1 << j
        without = masks[(masks & bit) == 0]
        phi[j] = np.sum(weights[size[without]] * (v[without | bit] - v[without]))
    return phi


@dataclass
class ShapSummary:
    ranking: list[tuple[str, float]]  # (feature, mean |phi|), most important first
    rows: list[tuple]  # (feature, rank, shap_value, feature_value, feature_percentile, sample index)

    def rank_of(self, feature: str) -> int:
        return [name for name, _ in self.ranking].index(feature) + 1


def feature_percentiles(X: np.ndarray) -> np.ndarray:
    """Percentile (0-100, mid-rank for ties) of each value within its column; NaN stays NaN."""
    out = np.full(X.shape, np.nan)
    for j in range(X.shape[1]):
        col = X[:, j]
        ok = ~np.isnan(col)
        if ok.any():
            out[ok, j] = 100.0 * (rankdata(col[ok]) - 0.5) / ok.sum()
    return out


def shap_summary(attr: AttributionMatrix | np.ndarray, X, feature_names: Sequence[str] = DEFAULT_SCHEMA.names) -> ShapSummary:
    values = attr.values if isinstance(attr, AttributionMatrix) else np.asarray(attr, dtype=float)
    values = np.atleast_2d(values)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if values.size == 0:
        raise ValueError("empty attribution matrix")
    mean_abs = np.abs(values).mean(axis=0)
    # stable sort on -mean keeps schema order among ties
    order = np.argsort(-mean_abs, kind="mergesort")
    ranking = [(feature_names[j], float(mean_abs[j])) for j in order]
    rank = np.empty(len(order), dtype=int)
    rank[order] = np.arange(1, len(order) + 1)
    pct = feature_percentiles(X)
    rows = []
    for j in order:
        for i in range(values.shape[0]):
            rows.append((feature_names[j], int(rank[j]), float(values[i, j]), float(X[i, j]), float(pct[i, j]), i))
    return ShapSummary(ranking, rows)


BEESWARM_COLUMNS = ["target", "record_id", "feature", "rank", "shap_value", "feature_value", "feature_percentile"]


def _num(v: float) -> str:
    return "" if math.isnan(v) else repr(v)


def write_beeswarm(summary: ShapSummary, record_ids: Sequence[str], target: str, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BEESWARM_COLUMNS)
        for feature, rank, phi, value, pct, i in summary.rows:
            w.writerow([target, record_ids[i], feature, rank, repr(phi), _num(value), _num(pct)])


def write_attributions(attr: AttributionMatrix, record_ids: Sequence[str], path: str | Path,
                       feature_names: Sequence[str] = DEFAULT_SCHEMA.names) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["record_id", "base_value", *feature_names])
        for rid, row in zip(record_ids, attr.values):
            w.writerow([rid, repr(float(attr.base_value)), *(repr(float(v)) for v in row)])
