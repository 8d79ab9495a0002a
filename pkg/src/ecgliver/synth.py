"""Synthetic cohorts with Table-1-style marginals and planted logistic label models.

Continuous features follow a logistic distribution parameterized by median
and IQR (quartiles at ``median +/- IQR/2``). Each target has a planted logit
``intercept + sum(coef * z)`` where ``z = (x - median) / IQR`` for continuous
features and ``z = sex`` (0/1). Targets in one prefix chain share a single
uniform draw, with the child's probability capped at its parent's, so a
positive child always implies a positive parent.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.optimize import brentq

from .ingest import RawRecord, write_cohort_file
from .metrics import auroc
from .schema import DEFAULT_SCHEMA, ECG_FEATURES

CALIBRATION_SEED = 917_311
CALIBRATION_N = 200_000
LOG3 = math.log(3.0)


@dataclass
class Marginal:
    median: float
    iqr: float
    family: str = "logistic"

    @property
    def scale(self) -> float:
        return self.iqr / (2.0 * LOG3)


@dataclass
class TargetModel:
    code: str
    prevalence: float
    coefficients: dict[str, float] = field(default_factory=dict)
    intercept: Optional[float] = None  # solved from ``prevalence`` when None


@dataclass
class SynthSpec:
    n_samples: int
    marginals: dict[str, Marginal]
    male_ratio: float
    targets: list[TargetModel]
    missingness: dict[str, float] = field(default_factory=dict)
    seed: int = 0
    block_size: int = 16384
    id_prefix: str = "S"
    dotted_codes: bool = False
    background_code_rate: float = 0.3

    def __post_init__(self):
        for name, m in self.marginals.items():
            if m.iqr <= 0:
                raise ValueError(f"IQR of {name} must be positive")
            if m.family != "logistic":
                raise ValueError(f"unsupported marginal family {m.family!r}")
        for name, rate in self.missingness.items():
            if not 0.0 <= rate < 1.0:
                raise ValueError(f"missingness of {name} must lie in [0, 1)")
            if name in ("age", "sex"):
                raise ValueError("age and sex cannot be missing")
        if not 0.0 < self.male_ratio < 1.0:
            raise ValueError("male_ratio must lie in (0, 1)")
        codes = [t.code for t in self.targets]
        for t in self.targets:
            parent = _parent(t.code, codes)
            if parent is not None:
                pt = self.targets[codes.index(parent)]
                if t.prevalence > pt.prevalence:
                    raise ValueError(
                        f"infeasible hierarchy: {t.code} prevalence {t.prevalence} exceeds parent "
                        f"{parent} prevalence {pt.prevalence}")

    def target(self, code: str) -> TargetModel:
        for t in self.targets:
            if t.code == code:
                return t
        raise KeyError(code)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        d["marginals"] = {k: Marginal(**v) for k, v in d["marginals"].items()}
        d["targets"] = [TargetModel(**t) for t in d["targets"]]
        return cls(**d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "SynthSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _parent(code: str, codes) -> Optional[str]:
    """Longest other code in ``codes`` that is a prefix of ``code``."""
    cands = [c for c in codes if c != code and code.startswith(c)]
    return max(cands, key=len) if cands else None


def _root(code: str, codes) -> str:
    while (p := _parent(code, codes)) is not None:
        code = p
    return code


ALD_EFFECTS = {"qtc_interval": 1.2, "age": 1.1, "sex": 0.8, "rr_interval": 0.3, "t_axis": -0.3}
HF_EFFECTS = {"age": 1.1, "qtc_interval": 1.2, "sex": 0.7, "rr_interval": -0.35, "pr_interval": -0.2}


def default_spec(n_samples: int = 100_000, seed: int = 0, **overrides) -> SynthSpec:
    """Internal-style cohort with MIMIC-IV-ECG cohort summary marginals."""
    marginals = {
        "rr_interval": Marginal(769, 264),
        "pr_interval": Marginal(158, 38),
        "qrs_duration": Marginal(94, 23),
        "qt_interval": Marginal(394, 68),
        "qtc_interval": Marginal(447, 47),
        "p_axis": Marginal(51, 32),
        "qrs_axis": Marginal(13, 61),
        "t_axis": Marginal(42, 58),
        "age": Marginal(66, 25),
    }
    targets = [
        TargetModel("K70", 0.0221, dict(ALD_EFFECTS)),
        TargetModel("K703", 0.0140, dict(ALD_EFFECTS)),
        TargetModel("K7030", 0.0090, dict(ALD_EFFECTS)),
        TargetModel("K72", 0.0150, dict(HF_EFFECTS)),
        TargetModel("K729", 0.0100, dict(HF_EFFECTS)),
        TargetModel("K7290", 0.0067, dict(HF_EFFECTS)),
    ]
    spec = SynthSpec(
        n_samples=n_samples,
        marginals=marginals,
        male_ratio=240_837 / (226_892 + 240_837),
        targets=targets,
        missingness={"pr_interval": 0.02, "p_axis": 0.02},
        seed=seed,
        id_prefix="M",
    )
    return replace(spec, **overrides) if overrides else spec


def external_spec(n_samples: int = 100_000, seed: int = 1, **overrides) -> SynthSpec:
    """External-style cohort with ECG-View II cohort summary marginals and lower prevalence."""
    marginals = {
        "rr_interval": Marginal(857, 227),
        "pr_interval": Marginal(158, 28),
        "qrs_duration": Marginal(90, 14),
        "qt_interval": Marginal(392, 48),
        "qtc_interval": Marginal(421, 37),
        "p_axis": Marginal(53, 28),
        "qrs_axis": Marginal(48, 49),
        "t_axis": Marginal(44, 33),
        "age": Marginal(52, 25),
    }
    targets = [
        TargetModel("K70", 0.0067, dict(ALD_EFFECTS)),
        TargetModel("K703", 0.0030, dict(ALD_EFFECTS)),
        TargetModel("K7030", 0.0015, dict(ALD_EFFECTS)),
        TargetModel("K72", 0.0020, dict(HF_EFFECTS)),
        TargetModel("K729", 0.0008, dict(HF_EFFECTS)),
        TargetModel("K7290", 0.0003, dict(HF_EFFECTS)),
    ]
    spec = SynthSpec(
        n_samples=n_samples,
        marginals=marginals,
        male_ratio=399_802 / (375_733 + 399_802),
        targets=targets,
        missingness={"pr_interval": 0.01, "p_axis": 0.01},
        seed=seed,
        id_prefix="E",
        dotted_codes=True,
    )
    return replace(spec, **overrides) if overrides else spec


def _standardized(spec: SynthSpec, X: np.ndarray) -> np.ndarray:
    Z = np.zeros_like(X)
    for j, name in enumerate(DEFAULT_SCHEMA.names):
        if name == "sex":
            Z[:, j] = X[:, j]
        elif name in spec.marginals:
            m = spec.marginals[name]
            Z[:, j] = (X[:, j] - m.median) / m.iqr
    return Z


def _draw_features(spec: SynthSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    X = np.empty((n, len(DEFAULT_SCHEMA)))
    for j, fs in enumerate(DEFAULT_SCHEMA.features):
        if fs.name == "sex":
            X[:, j] = (rng.random(n) < spec.male_ratio).astype(float)
        else:
            m = spec.marginals[fs.name]
            lo, hi = fs.plausible_range
            X[:, j] = np.clip(rng.logistic(m.median, m.scale, n), lo, hi)
    return X


def _linear_logits(spec: SynthSpec, Z: np.ndarray, intercepts: dict[str, float]) -> dict[str, np.ndarray]:
    names = DEFAULT_SCHEMA.names
    out = {}
    for t in spec.targets:
        lin = np.full(Z.shape[0], intercepts[t.code])
        for name, coef in sorted(t.coefficients.items()):
            lin += coef * Z[:, names.index(name)]
        out[t.code] = lin
    return out


def _effective_probs(spec: SynthSpec, logits: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    codes = [t.code for t in spec.targets]
    probs: dict[str, np.ndarray] = {}
    for code in sorted(codes, key=len):
        p = 1.0 / (1.0 + np.exp(-logits[code]))
        parent = _parent(code, codes)
        probs[code] = p if parent is None else np.minimum(p, probs[parent])
    return probs


_intercept_cache: dict[str, dict[str, float]] = {}


def solve_intercepts(spec: SynthSpec) -> dict[str, float]:
    """Intercepts that hit each target's prevalence on a fixed calibration draw."""
    key = json.dumps({"m": asdict(spec)["marginals"], "t": asdict(spec)["targets"], "r": spec.male_ratio}, sort_keys=True)
    if key in _intercept_cache:
        return dict(_intercept_cache[key])
    rng = np.random.default_rng(CALIBRATION_SEED)
    Z = _standardized(spec, _draw_features(spec, rng, CALIBRATION_N))
    codes = [t.code for t in spec.targets]
    intercepts: dict[str, float] = {}
    probs: dict[str, np.ndarray] = {}
    names = DEFAULT_SCHEMA.names
    for t in sorted(spec.targets, key=lambda t: len(t.code)):
        lin = np.zeros(CALIBRATION_N)
        for name, coef in sorted(t.coefficients.items()):
            lin += coef * Z[:, names.index(name)]
        parent = _parent(t.code, codes)
        cap = probs[parent] if parent is not None else None

        def prevalence(b, lin=lin, cap=cap):
            p = 1.0 / (1.0 + np.exp(-(lin + b)))
            if cap is not None:
                p = np.minimum(p, cap)
            return p

        if t.intercept is not None:
            b = float(t.intercept)
        else:
            b = brentq(lambda b: prevalence(b).mean() - t.prevalence, -60.0, 60.0, xtol=1e-12)
        intercepts[t.code] = b
        probs[t.code] = prevalence(b)
    _intercept_cache[key] = dict(intercepts)
    return intercepts


@dataclass
class SynthDraw:
    X_true: np.ndarray  # before missingness
    X: np.ndarray  # observed (NaN = missing)
    labels: np.ndarray  # samples x targets
    probs: np.ndarray  # true label probabilities, samples x targets
    codes: list[str]


def generate_arrays(spec: SynthSpec) -> SynthDraw:
    """Draw the cohort block by block; block ``b`` uses the generator seeded ``(seed, b)``."""
    intercepts = solve_intercepts(spec)
    codes = [t.code for t in spec.targets]
    roots = sorted({_root(c, codes) for c in codes})
    names = DEFAULT_SCHEMA.names
    Xs, Xts, Ls, Ps = [], [], [], []
    n_blocks = max(1, -(-spec.n_samples // spec.block_size))
    for b in range(n_blocks):
        n = min(spec.block_size, spec.n_samples - b * spec.block_size)
        if n <= 0:
            break
        rng = np.random.default_rng([spec.seed, b])
        X = _draw_features(spec, rng, n)
        u = {r: rng.random(n) for r in roots}
        probs = _effective_probs(spec, _linear_logits(spec, _standardized(spec, X), intercepts))
        L = np.column_stack([u[_root(c, codes)] < probs[c] for c in codes]).astype(np.int8)
        Xo = X.copy()
        for name in sorted(spec.missingness):
            rate = spec.missingness[name]
            Xo[rng.random(n) < rate, names.index(name)] = np.nan
        Xs.append(Xo)
        Xts.append(X)
        Ls.append(L)
        Ps.append(np.column_stack([probs[c] for c in codes]))
    return SynthDraw(np.vstack(Xts), np.vstack(Xs), np.vstack(Ls), np.vstack(Ps), codes)


def _dotted(code: str) -> str:
    return code if len(code) <= 3 else f"{code[:3]}.{code[3:]}"


BACKGROUND_CODES = ("I10", "E119", "N179", "I4891", "J189", "K219")


def to_records(spec: SynthSpec, draw: SynthDraw) -> list[RawRecord]:
    """Encode each positive chain by its deepest positive code, plus unrelated background codes."""
    names = DEFAULT_SCHEMA.names
    ecg_idx = [names.index(f) for f in ECG_FEATURES]
    age_i, sex_i = names.index("age"), names.index("sex")
    codes = draw.codes
    # background codes come from a stream separate from the label draws
    rng = np.random.default_rng([spec.seed, 0x5EED, len(draw.X)])
    has_bg = rng.random(len(draw.X)) < spec.background_code_rate
    bg = rng.integers(0, len(BACKGROUND_CODES), len(draw.X))
    records = []
    for i in range(len(draw.X)):
        row = draw.X[i]
        pos = {c for c, b in zip(codes, draw.labels[i]) if b}
        icd = []
        for c in sorted(pos, key=len, reverse=True):
            if not any(o.startswith(c) for o in icd):
                icd.append(c)
        if has_bg[i]:
            icd.append(BACKGROUND_CODES[bg[i]])
        if spec.dotted_codes:
            icd = [_dotted(c) for c in icd]
        records.append(RawRecord(
            record_id=f"{spec.id_prefix}{i:07d}",
            age=float(row[age_i]),
            sex="M" if row[sex_i] == 1.0 else "F",
            ecg=tuple(None if np.isnan(row[j]) else float(row[j]) for j in ecg_idx),
            icd_codes=sorted(icd),
        ))
    return records


def generate(spec: SynthSpec, path: str | Path | None = None) -> list[RawRecord]:
    """Generate a cohort in the ingest file format; writes it when ``path`` is given."""
    records = to_records(spec, generate_arrays(spec))
    if path is not None:
        write_cohort_file(records, path)
    return records


def oracle_bayes_auroc(spec: SynthSpec, n: int, target: str = "K70", seed: Optional[int] = None) -> float:
    """AUROC of the true label probability on a fresh draw of ``n`` samples."""
    s = replace(spec, n_samples=n, seed=spec.seed + 10_007 if seed is None else seed)
    j = [t.code for t in s.targets].index(target)
    for attempt in range(2):
        draw = generate_arrays(s)
        y = draw.labels[:, j]
        if 0 < y.sum() < len(y):
            return auroc(draw.probs[:, j], y)
        s = replace(s, seed=s.seed + 1)
    raise ValueError(f"degenerate label draw for {target} at n={n}")
