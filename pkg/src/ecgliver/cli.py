"""Command-line entry point.

Exit codes: 0 success, 2 some targets failed, 1 fatal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .gbdt import TrainParams, TreeEnsemble, train
from .ingest import load_cohort, read_labeled_cohort, write_labeled_cohort
from .metrics import evaluate, write_report, write_roc
from .pipeline import ConfigError, run_pipeline
from .schema import CANONICAL_CODES
from .splits import FoldPlan, assign_folds, n_strata, write_fold_file
from .synth import SynthSpec, default_spec, external_spec, generate
from .treeshap import explain, shap_summary, write_attributions, write_beeswarm

log = logging.getLogger("ecgliver")


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e


def _rows(cohort, fold: str, plan: FoldPlan) -> np.ndarray:
    if fold == "all":
        return np.ones(len(cohort), dtype=bool)
    if cohort.fold_of is None:
        raise ConfigError("cohort has no fold assignment; run `split` first or use --fold all")
    return {"train": np.isin(cohort.fold_of, sorted(plan.train_folds)),
            "val": cohort.fold_of == plan.val_fold,
            "test": cohort.fold_of == plan.test_fold}[fold]


def cmd_synth(args) -> int:
    if args.spec:
        spec = SynthSpec.load(args.spec)
    else:
        make = default_spec if args.preset == "internal" else external_spec
        spec = make(n_samples=args.n)
    if args.seed is not None:
        spec.seed = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{args.preset}.csv"
    generate(spec, path)
    spec.save(out / f"{args.preset}_spec.json")
    print(path)
    return 0


def cmd_ingest(args) -> int:
    cohort = load_cohort(args.input, args.targets, source_tag=args.source)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{args.source}_labeled.csv"
    write_labeled_cohort(cohort, path)
    print(f"{path}: {len(cohort)} records, prevalence "
          + ", ".join(f"{c}={cohort.labels[:, j].mean():.4%}" for j, c in enumerate(cohort.codes)))
    return 0


def cmd_split(args) -> int:
    cohort = read_labeled_cohort(args.input)
    plan = FoldPlan(args.n_folds, args.seed or 0)
    cohort.fold_of = assign_folds(cohort, plan)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_fold_file(cohort.record_ids, cohort.fold_of, out / "folds.csv")
    write_labeled_cohort(cohort, out / "labeled_folds.csv")
    print(f"{len(cohort)} records in {n_strata(cohort)} strata over {plan.n_folds} folds")
    return 0


def cmd_train(args) -> int:
    cohort = read_labeled_cohort(args.input)
    plan = FoldPlan(args.n_folds)
    params = TrainParams(max_depth=args.max_depth, n_rounds_max=args.n_rounds, learning_rate=args.learning_rate,
                         l2_reg=args.l2_reg, min_split_gain=args.min_split_gain,
                         min_child_weight=args.min_child_weight, patience=args.patience, seed=args.seed or 0)
    y = cohort.label(args.target).astype(float)
    tr, va = _rows(cohort, "train", plan), _rows(cohort, "val", plan)
    model, hist = train(cohort.X[tr], y[tr], cohort.X[va], y[va], args.target, params)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / f"{args.target}.json")
    (out / f"{args.target}_history.json").write_text(json.dumps(hist.to_dict(), indent=1) + "\n")
    print(f"{args.target}: {len(model.trees)} trees, best val AUROC {hist.best_val_auroc:.4f}")
    return 0


def cmd_eval(args) -> int:
    model = TreeEnsemble.load(args.model)
    cohort = read_labeled_cohort(args.input)
    sel = _rows(cohort, args.fold, FoldPlan(args.n_folds))
    y = cohort.label(model.target)[sel]
    rep = evaluate(model.predict_margin(cohort.X[sel], cohort.schema), y, model.target, args.tag,
                   n_iter=args.n_boot, seed=args.seed or 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(rep, out / f"{model.target}_{args.tag}.json")
    write_roc(rep.roc_points, out / f"{model.target}_{args.tag}_roc.csv")
    lo, hi = rep.interval_95
    print(f"{model.target} [{args.tag}] AUROC {rep.auroc:.4f} (95% {lo:.4f}-{hi:.4f}), prevalence {rep.prevalence:.4%}")
    return 0


def cmd_explain(args) -> int:
    model = TreeEnsemble.load(args.model)
    cohort = read_labeled_cohort(args.input)
    sel = _rows(cohort, args.fold, FoldPlan(args.n_folds))
    X = cohort.X[sel]
    ids = [r for r, s in zip(cohort.record_ids, sel) if s]
    attr = explain(model, X, cohort.schema)
    summary = shap_summary(attr, X)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_beeswarm(summary, ids, model.target, out / f"{model.target}_beeswarm.csv")
    write_attributions(attr, ids, out / f"{model.target}_attributions.csv")
    for rank, (name, v) in enumerate(summary.ranking, 1):
        print(f"{rank:2d}. {name:14s} {v:.4f}")
    return 0


def cmd_run(args) -> int:
    manifest = run_pipeline(_load_config(args.config), args.out, jobs=args.jobs, seed=args.seed)
    for code, t in manifest.targets.items():
        if t["status"] != "ok":
            print(f"{code}: FAILED {t['error']}")
            continue
        parts = [f"{code}:"]
        for tag, r in t["reports"].items():
            lo, hi = r["interval_95"]
            parts.append(f"{tag} {r['auroc']:.3f} [{lo:.3f}, {hi:.3f}] prev {r['prevalence']:.3%}")
        print("  ".join(parts))
    return manifest.exit_code


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--config", default=None, help="JSON run configuration")
    common.add_argument("--out", default="out")
    common.add_argument("--jobs", type=int, default=1)
    common.add_argument("--log-level", default="WARNING")

    folds = argparse.ArgumentParser(add_help=False)
    folds.add_argument("--n-folds", type=int, default=20)

    p = argparse.ArgumentParser(prog="ecgliver", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic cohort file")
    s.add_argument("--preset", choices=["internal", "external"], default="internal")
    s.add_argument("--n", type=int, default=100_000)
    s.add_argument("--spec", help="SynthSpec JSON (overrides --preset/--n)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", parents=[common], help="parse a cohort file and derive labels")
    s.add_argument("input")
    s.add_argument("--source", default="internal")
    s.add_argument("--targets", nargs="+", default=list(CANONICAL_CODES))
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("split", parents=[common, folds], help="assign stratified folds")
    s.add_argument("input")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", parents=[common, folds], help="train one target")
    s.add_argument("input")
    s.add_argument("--target", required=True)
    d = TrainParams()
    s.add_argument("--max-depth", type=int, default=d.max_depth)
    s.add_argument("--n-rounds", type=int, default=d.n_rounds_max)
    s.add_argument("--learning-rate", type=float, default=d.learning_rate)
    s.add_argument("--l2-reg", type=float, default=d.l2_reg)
    s.add_argument("--min-split-gain", type=float, default=d.min_split_gain)
    s.add_argument("--min-child-weight", type=float, default=d.min_child_weight)
    s.add_argument("--patience", type=int, default=d.patience)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common, folds], help="AUROC with bootstrap interval")
    s.add_argument("input")
    s.add_argument("--model", required=True)
    s.add_argument("--fold", choices=["test", "val", "train", "all"], default="test")
    s.add_argument("--tag", choices=["internal", "external"], default="internal")
    s.add_argument("--n-boot", type=int, default=1000)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("explain", parents=[common, folds], help="TreeSHAP attributions and beeswarm export")
    s.add_argument("input")
    s.add_argument("--model", required=True)
    s.add_argument("--fold", choices=["test", "val", "train", "all"], default="test")
    s.set_defaults(func=cmd_explain)

    s = sub.add_parser("run", parents=[common], help="full experiment from a config file")
    s.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as e:
        log.error("%s", e, exc_info=log.isEnabledFor(logging.DEBUG))
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
