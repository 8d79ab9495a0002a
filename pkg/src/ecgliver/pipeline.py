"""End-to-end experiment: synth/ingest -> split -> train -> eval -> explain, per target.

Output layout under the run directory::

    config.json                 resolved configuration
    manifest.json               RunManifest
    data/internal.csv           cohort files (written when synthesized)
    data/external.csv
    data/folds.csv              record_id, fold_index
    models/<code>.json          model dumps
    history/<code>.json         per-round train loss / val AUROC
    reports/<code>_<tag>.json   EvalReports (tag = internal | external)
    roc/<code>_<tag>.csv        ROC points
    shap/<code>_beeswarm.csv    beeswarm rows
    shap/<code>_attributions.csv
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from . import __version__
from .gbdt import TrainParams, TreeEnsemble, train
from .ingest import load_cohort, write_labeled_cohort
from .metrics import evaluate, write_report, write_roc
from .schema import CANONICAL_CODES, LabeledCohort
from .splits import FoldPlan, assign_folds, write_fold_file
from .synth import SynthSpec, default_spec, external_spec, generate
from .treeshap import explain, shap_summary, write_attributions, write_beeswarm

log = logging.getLogger(__name__)

DEFAULT_CONFIG: dict[str, Any] = {
    "seed": 0,
    "targets": list(CANONICAL_CODES),
    "internal": {"synth": {"preset": "internal", "n_samples": 100_000}},
    "external": {"synth": {"preset": "external", "n_samples": 100_000}},
    "folds": {"n_folds": 20},
    "train": {},
    "bootstrap": {"n_iter": 1000},
    "explain": {"split": "test"},
}


class ConfigError(ValueError):
    pass


def resolve_config(config: Optional[dict] = None, seed: Optional[int] = None) -> dict:
    """Fill defaults; ``seed`` (e.g. from the command line) overrides the config's."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    for k, v in (config or {}).items():
        if k not in cfg:
            raise ConfigError(f"unknown config key {k!r}")
        cfg[k] = v
    if seed is not None:
        cfg["seed"] = int(seed)
    for key in ("internal", "external"):
        src = cfg[key]
        if src is None:
            if key == "internal":
                raise ConfigError("an internal cohort is required")
            continue
        if ("cohort" in src) == ("synth" in src):
            raise ConfigError(f"{key}: give exactly one of 'cohort' or 'synth'")
    if cfg["explain"].get("split", "test") not in ("test", "all"):
        raise ConfigError("explain.split must be 'test' or 'all'")
    TrainParams(**{**cfg["train"], "seed": cfg["seed"]})  # validate early
    return cfg


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _synth_spec(src: dict, key: str, seed: int) -> SynthSpec:
    s = dict(src)
    if "spec" in s:
        return SynthSpec.from_dict(s["spec"])
    preset = s.pop("preset", key)
    make = default_spec if preset == "internal" else external_spec
    # internal and external cohorts get distinct streams from one base seed
    spec_seed = s.pop("seed", seed if key == "internal" else seed + 1)
    return make(n_samples=int(s.pop("n_samples", 100_000)), seed=spec_seed, **s)


def _load_source(cfg: dict, key: str, out: Path) -> tuple[LabeledCohort, str]:
    src = cfg[key]
    if "cohort" in src:
        path = Path(src["cohort"])
    else:
        path = out / "data" / f"{key}.csv"
        generate(_synth_spec(src["synth"], key, cfg["seed"]), path)
    return load_cohort(path, cfg["targets"], source_tag=key), str(path)


@dataclass
class TargetJob:
    code: str
    out: str
    ids_int: list
    X_int: np.ndarray
    y_int: np.ndarray
    fold_of: np.ndarray
    plan: FoldPlan
    params: TrainParams
    n_boot: int
    boot_seed: int
    explain_split: str
    ids_ext: Optional[list] = None
    X_ext: Optional[np.ndarray] = None
    y_ext: Optional[np.ndarray] = None


def run_target(job: TargetJob) -> dict:
    """Train, evaluate and explain one target; failures are reported, not raised."""
    out = Path(job.out)
    entry: dict[str, Any] = {"status": "ok", "files": {}, "timings": {}}
    try:
        t0 = time.perf_counter()
        tr = np.isin(job.fold_of, sorted(job.plan.train_folds))
        va = job.fold_of == job.plan.val_fold
        te = job.fold_of == job.plan.test_fold
        model, hist = train(job.X_int[tr], job.y_int[tr], job.X_int[va], job.y_int[va], job.code, job.params)
        model_path = out / "models" / f"{job.code}.json"
        model.save(model_path)
        (out / "history" / f"{job.code}.json").write_text(json.dumps(hist.to_dict(), indent=1, sort_keys=True) + "\n")
        entry["files"]["model"] = f"models/{job.code}.json"
        entry["files"]["history"] = f"history/{job.code}.json"
        entry["n_trees"] = len(model.trees)
        entry["best_val_auroc"] = hist.best_val_auroc
        entry["timings"]["train"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        entry["reports"] = {}
        sets = [("internal", job.X_int[te], job.y_int[te])]
        if job.X_ext is not None:
            sets.append(("external", job.X_ext, job.y_ext))
        for tag, X, y in sets:
            rep = evaluate(model.predict_margin(X), y, job.code, tag, n_iter=job.n_boot, seed=job.boot_seed)
            write_report(rep, out / "reports" / f"{job.code}_{tag}.json")
            write_roc(rep.roc_points, out / "roc" / f"{job.code}_{tag}.csv")
            entry["files"][f"report_{tag}"] = f"reports/{job.code}_{tag}.json"
            entry["files"][f"roc_{tag}"] = f"roc/{job.code}_{tag}.csv"
            entry["reports"][tag] = {
                "auroc": rep.auroc, "interval_95": list(rep.interval_95),
                "n_pos": rep.n_pos, "n_neg": rep.n_neg, "prevalence": rep.prevalence,
            }
        entry["timings"]["eval"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        sel = te if job.explain_split == "test" else np.ones(len(job.fold_of), dtype=bool)
        X_exp = job.X_int[sel]
        ids = [r for r, s in zip(job.ids_int, sel) if s]
        attr = explain(model, X_exp)
        err = float(np.max(np.abs(attr.margins() - model.predict_margin(X_exp)))) if len(X_exp) else 0.0
        summary = shap_summary(attr, X_exp)
        write_beeswarm(summary, ids, job.code, out / "shap" / f"{job.code}_beeswarm.csv")
        write_attributions(attr, ids, out / "shap" / f"{job.code}_attributions.csv")
        entry["files"]["beeswarm"] = f"shap/{job.code}_beeswarm.csv"
        entry["files"]["attributions"] = f"shap/{job.code}_attributions.csv"
        entry["shap"] = {"base_value": attr.base_value, "max_local_accuracy_error": err,
                         "ranking": [[n, v] for n, v in summary.ranking]}
        entry["timings"]["explain"] = time.perf_counter() - t0
    except Exception as e:  # isolate per-target failures
        log.error("target %s failed: %s", job.code, e)
        entry["status"] = "failed"
        entry["error"] = f"{type(e).__name__}: {e}"
    return entry


@dataclass
class RunManifest:
    tool_version: str
    config_digest: str
    seeds: dict
    targets: dict
    cohorts: dict
    artifacts: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(t["status"] == "ok" for t in self.targets.values())

    @property
    def exit_code(self) -> int:
        return 0 if self.ok else 2

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path: Path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def verify_manifest(manifest: RunManifest, out: Path) -> list[str]:
    """Referenced artifacts that are missing or whose digest does not match."""
    bad = []
    for rel, digest in manifest.artifacts.items():
        p = Path(out) / rel
        if not p.exists() or sha256_file(p) != digest:
            bad.append(rel)
    return bad


def run_pipeline(config: Optional[dict], out: str | Path, jobs: int = 1, seed: Optional[int] = None) -> RunManifest:
    t_start = time.perf_counter()
    cfg = resolve_config(config, seed)
    out = Path(out)
    for sub in ("data", "models", "history", "reports", "roc", "shap"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")
    timings: dict[str, Any] = {}

    t0 = time.perf_counter()
    internal, _ = _load_source(cfg, "internal", out)
    external = None
    if cfg["external"] is not None:
        external, _ = _load_source(cfg, "external", out)
    timings["load"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    plan = FoldPlan(n_folds=int(cfg["folds"].get("n_folds", 20)), seed=int(cfg["folds"].get("seed", cfg["seed"])))
    internal.fold_of = assign_folds(internal, plan)
    write_fold_file(internal.record_ids, internal.fold_of, out / "data" / "folds.csv")
    write_labeled_cohort(internal, out / "data" / "internal_labeled.csv")
    timings["split"] = time.perf_counter() - t0

    params = TrainParams(**{**cfg["train"], "seed": cfg["seed"]})
    boot_seed = int(cfg["bootstrap"].get("seed", cfg["seed"]))
    job_list = []
    for j, code in enumerate(internal.codes):
        job_list.append(TargetJob(
            code=code, out=str(out), ids_int=internal.record_ids, X_int=internal.X,
            y_int=internal.labels[:, j].astype(float), fold_of=internal.fold_of, plan=plan, params=params,
            n_boot=int(cfg["bootstrap"].get("n_iter", 1000)), boot_seed=boot_seed,
            explain_split=cfg["explain"].get("split", "test"),
            ids_ext=None if external is None else external.record_ids,
            X_ext=None if external is None else external.X,
            y_ext=None if external is None else external.labels[:, j].astype(float),
        ))
    t0 = time.perf_counter()
    if jobs > 1 and len(job_list) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(job_list))) as pool:
            entries = list(pool.map(run_target, job_list))
    else:
        entries = [run_target(j) for j in job_list]
    timings["targets_total"] = time.perf_counter() - t0

    targets, artifacts = {}, {}
    for code, entry in zip(internal.codes, entries):
        timings[code] = entry.pop("timings")
        targets[code] = entry
        for rel in entry.get("files", {}).values():
            artifacts[rel] = sha256_file(out / rel)
    for rel in ("config.json", "data/folds.csv", "data/internal_labeled.csv"):
        artifacts[rel] = sha256_file(out / rel)
    if (out / "data" / "internal.csv").exists() and "synth" in cfg["internal"]:
        artifacts["data/internal.csv"] = sha256_file(out / "data" / "internal.csv")
    if external is not None and "synth" in cfg["external"]:
        artifacts["data/external.csv"] = sha256_file(out / "data" / "external.csv")

    def cohort_info(c: LabeledCohort) -> dict:
        return {
            "n": len(c), "source": c.source,
            "prevalence": {code: float(c.labels[:, j].mean()) for j, code in enumerate(c.codes)},
            "rejected": c.meta.get("rejected", 0) + c.meta.get("parse_rejected", 0),
        }

    cohorts = {"internal": cohort_info(internal)}
    if external is not None:
        cohorts["external"] = cohort_info(external)
    timings["total"] = time.perf_counter() - t_start
    manifest = RunManifest(
        tool_version=__version__,
        config_digest=config_digest(cfg),
        seeds={"base": cfg["seed"], "folds": plan.seed, "bootstrap": boot_seed, "train": params.seed},
        targets=targets,
        cohorts=cohorts,
        artifacts=artifacts,
        timings=timings,
    )
    manifest.write(out / "manifest.json")
    return manifest
