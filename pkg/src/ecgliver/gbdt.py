"""Second-order gradient-boosted regression trees for binary classification.

Exact greedy split search over presorted feature values, learned default
directions for missing values, and early stopping on validation AUROC.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .metrics import DegenerateLabelsError, auroc
from .schema import DEFAULT_SCHEMA, FeatureSchema

log = logging.getLogger(__name__)

FORMAT_NAME = "ecgliver-gbdt"
FORMAT_VERSION = 1
HESS_FLOOR = 1e-16
PREVALENCE_CLAMP = 1e-6


class DegenerateValidationError(ValueError):
    pass


class SchemaMismatchError(ValueError):
    pass


@dataclass
class TrainParams:
    max_depth: int = 6
    n_rounds_max: int = 500
    learning_rate: float = 0.1
    l2_reg: float = 1.0
    min_split_gain: float = 0.0
    min_child_weight: float = 1.0
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.n_rounds_max < 1 or self.patience < 1:
            raise ValueError("n_rounds_max and patience must be >= 1")
        if self.learning_rate <= 0 or self.l2_reg < 0 or self.min_split_gain < 0 or self.min_child_weight < 0:
            raise ValueError(f"invalid training parameters: {self}")


def sigmoid(margin):
    margin = np.asarray(margin, dtype=float)
    out = np.empty_like(margin)
    pos = margin >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-margin[pos]))
    e = np.exp(margin[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def logistic_grad_hess(margin, label):
    """Gradient and hessian of the log-loss with respect to the margin."""
    scalar = np.ndim(margin) == 0 and np.ndim(label) == 0
    p = sigmoid(np.atleast_1d(margin))
    g = p - np.atleast_1d(label)
    h = np.maximum(p * (1.0 - p), HESS_FLOOR)
    if scalar:
        return float(g[0]), float(h[0])
    return g, h


def log_loss(margin, label) -> float:
    margin = np.asarray(margin, dtype=float)
    return float(np.mean(np.logaddexp(0.0, margin) - label * margin))


@dataclass(frozen=True)
class SplitCandidate:
    feature: int
    threshold: float
    default_left: bool
    gain: float


def split_gain(GL, HL, GR, HR, lam, gamma):
    G, H = GL + GR, HL + HR
    return 0.5 * (GL * GL / (HL + lam) + GR * GR / (HR + lam) - G * G / (H + lam)) - gamma


def _midpoint(a: float, b: float) -> float:
    t = a + (b - a) / 2.0
    # routing is "x < threshold"; keep a on the left and b on the right
    return t if a < t <= b else b


def _scan_feature(values, g, h, G, H, G_miss, H_miss, lam, gamma, min_child_weight):
    """Best (gain, position, default_left) for one feature's sorted present values.

    Candidates are ordered by threshold, then default_left before
    default_right, so ``argmax`` resolves equal gains by the tie-break rule.
    """
    m = len(values)
    if m < 2:
        return None
    distinct = values[1:] > values[:-1]
    cg = np.cumsum(g)[:-1]
    ch = np.cumsum(h)[:-1]
    G_pres, H_pres = G - G_miss, H - H_miss
    parent = G * G / (H + lam)
    # with nothing missing both directions score identically and default_left wins
    directions = ((G_miss, H_miss), (0.0, 0.0)) if (G_miss != 0.0 or H_miss != 0.0) else ((0.0, 0.0),)
    gains = np.empty((m - 1, len(directions)))
    for col, (gm, hm) in enumerate(directions):
        GL = cg + gm
        HL = ch + hm
        GR = (G_pres - cg) + (G_miss - gm)
        HR = (H_pres - ch) + (H_miss - hm)
        gain = 0.5 * (GL * GL / (HL + lam) + GR * GR / (HR + lam) - parent) - gamma
        ok = distinct & (HL >= min_child_weight) & (HR >= min_child_weight)
        gains[:, col] = np.where(ok, gain, -np.inf)
    flat = gains.ravel()
    k = int(np.argmax(flat))
    if not np.isfinite(flat[k]):
        return None
    if len(directions) == 1:
        return float(flat[k]), k, True
    return float(flat[k]), k // 2, k % 2 == 0


def find_best_split(X, g, h, lam: float = 1.0, gamma: float = 0.0, min_child_weight: float = 1.0) -> Optional[SplitCandidate]:
    """Exact greedy search over every (feature, threshold, default direction).

    ``X`` holds the node's samples (NaN = missing). Returns ``None`` when no
    admissible split has positive gain. Equal gains resolve to the lowest
    feature index, then the lowest threshold, then default_left.
    """
    X = np.asarray(X, dtype=float)
    g = np.asarray(g, dtype=float)
    h = np.asarray(h, dtype=float)
    G, H = float(g.sum()), float(h.sum())
    sorted_rows = []
    for f in range(X.shape[1]):
        col = X[:, f]
        present = np.flatnonzero(~np.isnan(col))
        sorted_rows.append(present[np.argsort(col[present], kind="mergesort")])
    Xt = np.ascontiguousarray(X.T)
    return _best_split(Xt, g, h, np.arange(len(g)), sorted_rows, G, H, lam, gamma, min_child_weight)


def _best_split(Xt, g, h, rows, sorted_rows, G, H, lam, gamma, min_child_weight, has_missing=None):
    """``Xt`` is the feature-major (transposed, contiguous) data matrix."""
    best = None
    for f, idx in enumerate(sorted_rows):
        if len(idx) < 2:
            continue
        if has_missing is None or has_missing[f]:
            miss = rows[np.isnan(Xt[f][rows])]
            G_miss, H_miss = float(g[miss].sum()), float(h[miss].sum())
        else:
            G_miss = H_miss = 0.0
        values = Xt[f][idx]
        res = _scan_feature(values, g[idx], h[idx], G, H, G_miss, H_miss, lam, gamma, min_child_weight)
        if res is None:
            continue
        gain, pos, default_left = res
        if gain > 0 and (best is None or gain > best.gain):
            best = SplitCandidate(f, _midpoint(values[pos], values[pos + 1]), default_left, gain)
    return best


@dataclass
class Tree:
    """Binary tree in flat preorder arrays; ``left == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    default_left: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    cover: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def is_leaf(self, i: int) -> bool:
        return self.left[i] < 0

    def depth(self) -> int:
        def d(i):
            return 0 if self.left[i] < 0 else 1 + max(d(self.left[i]), d(self.right[i]))
        return d(0)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row."""
        n = X.shape[0]
        node = np.zeros(n, dtype=np.int64)
        active = np.arange(n)
        while active.size:
            nd = node[active]
            internal = self.left[nd] >= 0
            active, nd = active[internal], nd[internal]
            if not active.size:
                break
            xv = X[active, self.feature[nd]]
            go_left = np.where(np.isnan(xv), self.default_left[nd], xv < self.threshold[nd])
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_preorder(self) -> list[dict]:
        out = []
        for i in range(self.n_nodes):
            if self.left[i] < 0:
                out.append({"leaf": float(self.value[i]), "cover": float(self.cover[i])})
            else:
                out.append({
                    "feature": int(self.feature[i]),
                    "threshold": float(self.threshold[i]),
                    "default_left": bool(self.default_left[i]),
                    "cover": float(self.cover[i]),
                })
        return out

    @classmethod
    def from_preorder(cls, nodes: list[dict]) -> "Tree":
        b = _TreeBuffer()

        def build(pos: int) -> int:
            nd = nodes[pos]
            i = b.add()
            b.cover[i] = nd["cover"]
            if "leaf" in nd:
                b.value[i] = nd["leaf"]
                return pos + 1
            b.feature[i] = nd["feature"]
            b.threshold[i] = nd["threshold"]
            b.default_left[i] = nd["default_left"]
            b.left[i] = len(b.cover)
            nxt = build(pos + 1)
            b.right[i] = len(b.cover)
            return build(nxt)

        end = build(0)
        if end != len(nodes):
            raise ValueError("trailing nodes in preorder tree encoding")
        return b.freeze()


class _TreeBuffer:
    def __init__(self):
        self.feature, self.threshold, self.default_left = [], [], []
        self.left, self.right, self.value, self.cover = [], [], [], []

    def add(self) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.default_left.append(True)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(0.0)
        self.cover.append(0.0)
        return len(self.cover) - 1

    def freeze(self) -> Tree:
        return Tree(
            feature=np.array(self.feature, dtype=np.int64),
            threshold=np.array(self.threshold, dtype=float),
            default_left=np.array(self.default_left, dtype=bool),
            left=np.array(self.left, dtype=np.int64),
            right=np.array(self.right, dtype=np.int64),
            value=np.array(self.value, dtype=float),
            cover=np.array(self.cover, dtype=float),
        )


def presort(X: np.ndarray) -> list[np.ndarray]:
    out = []
    for f in range(X.shape[1]):
        col = X[:, f]
        present = np.flatnonzero(~np.isnan(col))
        out.append(present[np.argsort(col[present], kind="mergesort")])
    return out


def grow_tree(X, g, h, params: TrainParams, sorted_rows=None) -> Tree:
    """Grow one tree depth-first; leaf value is ``-eta * G / (H + lambda)``."""
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    if n == 0:
        raise ValueError("grow_tree needs at least one sample")
    if sorted_rows is None:
        sorted_rows = presort(X)
    has_missing = np.isnan(X).any(axis=0)
    Xt = np.ascontiguousarray(X.T)
    lam, eta = params.l2_reg, params.learning_rate
    goes_left = np.zeros(n, dtype=bool)
    b = _TreeBuffer()

    def build(rows, feat_rows, depth):
        G, H = float(g[rows].sum()), float(h[rows].sum())
        i = b.add()
        b.cover[i] = H
        split = None
        if depth < params.max_depth and len(rows) >= 2:
            split = _best_split(Xt, g, h, rows, feat_rows, G, H, lam, params.min_split_gain,
                                params.min_child_weight, has_missing)
        if split is None:
            b.value[i] = -eta * G / (H + lam)
            return
        f = split.feature
        b.feature[i] = f
        b.threshold[i] = split.threshold
        b.default_left[i] = split.default_left
        goes_left[rows] = split.default_left
        present = feat_rows[f]
        goes_left[present] = Xt[f][present] < split.threshold
        mask = goes_left[rows]
        left_rows, right_rows = rows[mask], rows[~mask]
        if depth + 1 < params.max_depth:
            left_feats, right_feats = [], []
            for fr in feat_rows:
                m = goes_left[fr]
                left_feats.append(fr[m])
                right_feats.append(fr[~m])
        else:
            left_feats = right_feats = None
        b.left[i] = len(b.cover)
        build(left_rows, left_feats, depth + 1)
        b.right[i] = len(b.cover)
        build(right_rows, right_feats, depth + 1)

    build(np.arange(n), sorted_rows, 0)
    return b.freeze()


@dataclass
class TreeEnsemble:
    base_score: float
    trees: list[Tree]
    schema_fingerprint: str = DEFAULT_SCHEMA.fingerprint
    n_features: int = len(DEFAULT_SCHEMA)
    target: str = ""
    params: dict = field(default_factory=dict)

    def _check(self, X, schema: Optional[FeatureSchema]) -> np.ndarray:
        if schema is not None and schema.fingerprint != self.schema_fingerprint:
            raise SchemaMismatchError(
                f"model trained on schema {self.schema_fingerprint}, got {schema.fingerprint}")
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise SchemaMismatchError(f"expected {self.n_features} features, got {X.shape[1]}")
        return X

    def predict_margin(self, X, schema: Optional[FeatureSchema] = None) -> np.ndarray:
        X = self._check(X, schema)
        m = np.full(X.shape[0], self.base_score)
        for t in self.trees:
            m += t.predict(X)
        return m

    def predict_proba(self, X, schema: Optional[FeatureSchema] = None) -> np.ndarray:
        return sigmoid(self.predict_margin(X, schema))

    def truncated(self, n_trees: int) -> "TreeEnsemble":
        return TreeEnsemble(self.base_score, self.trees[:n_trees], self.schema_fingerprint,
                            self.n_features, self.target, dict(self.params))

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "target": self.target,
            "schema_fingerprint": self.schema_fingerprint,
            "n_features": self.n_features,
            "base_score": float(self.base_score),
            "params": self.params,
            "trees": [t.to_preorder() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TreeEnsemble":
        if d.get("format") != FORMAT_NAME or d.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model format {d.get('format')!r} v{d.get('version')}")
        return cls(
            base_score=d["base_score"],
            trees=[Tree.from_preorder(t) for t in d["trees"]],
            schema_fingerprint=d["schema_fingerprint"],
            n_features=d["n_features"],
            target=d.get("target", ""),
            params=d.get("params", {}),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text: str) -> "TreeEnsemble":
        return cls.from_dict(json.loads(text))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "TreeEnsemble":
        return cls.loads(Path(path).read_text())


def predict_margin(ensemble: TreeEnsemble, x, schema: Optional[FeatureSchema] = None):
    return ensemble.predict_margin(x, schema)


def predict_proba(ensemble: TreeEnsemble, x, schema: Optional[FeatureSchema] = None):
    return ensemble.predict_proba(x, schema)


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    val_auroc: list[float] = field(default_factory=list)
    best_round: int = 0
    best_val_auroc: float = float("nan")
    stopped_early: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def train(X_train, y_train, X_val, y_val, target: str = "", params: TrainParams = TrainParams(),
          schema: FeatureSchema = DEFAULT_SCHEMA) -> tuple[TreeEnsemble, History]:
    """Boost until ``n_rounds_max`` or ``patience`` rounds without a validation AUROC gain.

    The returned ensemble is truncated to the round with the best validation
    AUROC (earliest on ties).
    """
    X_train = np.asarray(X_train, dtype=float)
    X_val = np.asarray(X_val, dtype=float)
    y_train = np.asarray(y_train, dtype=float)
    y_val = np.asarray(y_val, dtype=float)
    if len(y_train) == 0 or len(y_val) == 0:
        raise ValueError(f"{target}: empty training or validation set")
    n_val_pos = int(y_val.sum())
    if n_val_pos == 0 or n_val_pos == len(y_val):
        raise DegenerateValidationError(
            f"{target}: validation set is single-class ({n_val_pos} positives of {len(y_val)})")

    p = min(max(float(y_train.mean()), PREVALENCE_CLAMP), 1.0 - PREVALENCE_CLAMP)
    base = float(np.log(p / (1.0 - p)))
    m_train = np.full(len(y_train), base)
    m_val = np.full(len(y_val), base)
    sorted_rows = presort(X_train)
    trees: list[Tree] = []
    hist = History()
    best = -np.inf
    for r in range(1, params.n_rounds_max + 1):
        g, h = logistic_grad_hess(m_train, y_train)
        tree = grow_tree(X_train, g, h, params, sorted_rows)
        trees.append(tree)
        m_train += tree.predict(X_train)
        m_val += tree.predict(X_val)
        try:
            auc = auroc(m_val, y_val)
        except DegenerateLabelsError as e:  # pragma: no cover - guarded above
            raise DegenerateValidationError(f"{target}: {e}") from e
        hist.train_loss.append(log_loss(m_train, y_train))
        hist.val_auroc.append(auc)
        if auc > best:
            best, hist.best_round = auc, r
        elif r - hist.best_round >= params.patience:
            hist.stopped_early = True
            break
    hist.best_val_auroc = best
    log.info("%s: %d rounds, best round %d, val AUROC %.4f", target, len(trees), hist.best_round, best)
    ensemble = TreeEnsemble(base, trees[:hist.best_round], schema.fingerprint, len(schema), target, asdict(params))
    return ensemble, hist
