"""Command line interface.

    protomap generate        --config run.toml --seed 0
    protomap train-adpen     --config run.toml --seed 0
    protomap train-estimator --config run.toml --seed 0
    protomap evaluate        --config run.toml --seed 0
    protomap explain         --config run.toml --seed 0
    protomap run             --config run.toml --seed 0   # full cross-validation

Single-fold commands share state through ``pipeline.output_dir``.  On failure
a JSON object ``{"error", "message", "command"}`` is written to stderr and the
exit code is nonzero (2 invalid input, 3 stage ordering, 1 anything else).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .adpen import load_adpen, save_adpen
from .autodiff import UsageError
from .cohort import Cohort, ValidationError, load_cohort, save_cohort, stratified_kfold
from .config import RunConfig, load_config, task_kind
from .explain import save_explainable_map
from .likelihood import (LikelihoodMap, cae_from_dict, cae_to_dict, estimator_from_dict,
                         estimator_to_dict, load_json, pretrain_cae, save_json, train_estimator)
from .metrics import MetricsReport, write_reports
from .pipeline import (PipelineError, cohort_pseudo_maps, evaluate_task, explain_sample,
                       load_or_generate_cohort, run_adpen_stage, run_pipeline, task_targets)

log = logging.getLogger("protomap")


def _out(cfg: RunConfig) -> Path:
    p = Path(cfg.pipeline.output_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _cohort(cfg: RunConfig) -> Cohort:
    cached = Path(cfg.pipeline.output_dir) / "cohort.jsonl"
    if not cfg.cohort.path and cached.exists():
        return load_cohort(cached)
    return load_or_generate_cohort(cfg)


def _split(cfg: RunConfig, cohort: Cohort):
    return stratified_kfold(cohort.stages, cfg.pipeline.k, seed=cfg.pipeline.seed)[cfg.pipeline.fold]


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"{what} not found at {path}; run the earlier pipeline stage first")
    return path


def cmd_generate(cfg: RunConfig) -> dict:
    cohort = load_or_generate_cohort(cfg)
    path = _out(cfg) / "cohort.jsonl"
    save_cohort(cohort, path)
    return {"cohort": str(path), "n": len(cohort),
            "per_stage": np.bincount(cohort.stages, minlength=cohort.n_stages).tolist()}


def cmd_train_adpen(cfg: RunConfig) -> dict:
    out = _out(cfg)
    cohort = _cohort(cfg)
    train, val, test = _split(cfg, cohort)
    stage = run_adpen_stage(cohort, train, cfg.seeded(cfg.pipeline.fold))
    save_adpen(stage.model, out / "adpen.json")
    stage.result.log.to_csv(out / "adpen_curve.csv")
    stage.finetune_log.to_csv(out / "finetune_curve.csv")
    save_json({"fold": cfg.pipeline.fold, "train": train.tolist(), "validation": val.tolist(),
               "test": test.tolist()}, out / "split.json")
    return {"adpen": str(out / "adpen.json"), **stage.diagnostics}


def _load_stage(cfg: RunConfig):
    out = Path(cfg.pipeline.output_dir)
    model = load_adpen(_require(out / "adpen.json", "ADPEN checkpoint"))
    split = load_json(_require(out / "split.json", "fold split"))
    idx = [np.asarray(split[k], dtype=int) for k in ("train", "validation", "test")]
    return out, model, idx


def cmd_train_estimator(cfg: RunConfig) -> dict:
    out, model, (train, val, test) = _load_stage(cfg)
    cohort = _cohort(cfg)
    seeded = cfg.seeded(cfg.pipeline.fold)
    _, rho = cohort_pseudo_maps(model, cohort, cfg.pipeline.gamma)
    cae, cae_log = pretrain_cae(rho[train], seeded.cae)
    save_json(cae_to_dict(cae), out / "cae.json")
    cae_log.to_csv(out / "cae_curve.csv")
    summary = {"cae": str(out / "cae.json")}
    for task in cfg.pipeline.tasks:
        kind = task_kind(task)
        tr, y_tr, n_out = task_targets(cohort, task, train)
        va, y_va, _ = task_targets(cohort, task, val)
        res = train_estimator(cohort.imaging[tr], rho[tr], y_tr, cae, kind,
                              max(n_out, 2) if kind == "classification" else 1, seeded.estimator,
                              cohort.imaging[va], y_va, rho[va], adpen=model)
        save_json(estimator_to_dict(res.stack), out / f"estimator_{task}.json")
        res.log.to_csv(out / f"estimator_{task}_curve.csv")
        summary[task] = {"best_epoch": res.best_epoch, "best_val_score": res.best_score}
    return summary


def cmd_evaluate(cfg: RunConfig) -> dict:
    out, model, (train, val, test) = _load_stage(cfg)
    cohort = _cohort(cfg)
    cae = cae_from_dict(load_json(_require(out / "cae.json", "CAE checkpoint")))
    _, rho = cohort_pseudo_maps(model, cohort, cfg.pipeline.gamma)
    reports = []
    for task in cfg.pipeline.tasks:
        stack = estimator_from_dict(load_json(_require(out / f"estimator_{task}.json",
                                                       f"estimator for {task}")))
        te, y_te, _ = task_targets(cohort, task, test)
        metrics, _, _ = evaluate_task(stack, cae, cohort, te, y_te, rho)
        reports.append(MetricsReport(task, [metrics], [cfg.pipeline.fold]))
    write_reports(reports, out / "metrics_fold.json", out / "metrics_fold.csv")
    return {r.task: r.per_fold[0] for r in reports}


def cmd_explain(cfg: RunConfig) -> dict:
    out, model, (train, val, test) = _load_stage(cfg)
    cohort = _cohort(cfg)
    ex = cfg.explain
    task = ex.task or cfg.pipeline.tasks[0]
    cae = cae_from_dict(load_json(_require(out / "cae.json", "CAE checkpoint")))
    stack = estimator_from_dict(load_json(_require(out / f"estimator_{task}.json",
                                                   f"estimator for {task}")))
    q = ex.query_index
    if not 0 <= q < len(cohort):
        raise ValidationError(f"explain.query_index {q} outside cohort of {len(cohort)}")
    res = explain_sample(model, stack, cae, cohort, train, q, ex.n_nearest, ex.per_stage,
                         ex.tau, ex.percentile)
    edir = out / "explain"
    edir.mkdir(exist_ok=True)
    save_explainable_map(res["explainable_map"], edir / f"explainable_map_{q}.json")
    res["morph_diff"].to_csv(edir / f"morph_diff_{q}.csv")
    _, rho = cohort_pseudo_maps(model, cohort.subset([q]), cfg.pipeline.gamma)
    topo = model.grid.topology
    save_json({"pseudo": LikelihoodMap(rho[0], topo, "pseudo").to_dict(),
               "estimated": LikelihoodMap(res["explainable_map"].scores, topo, "estimated").to_dict()},
              edir / f"maps_{q}.json")
    k, state = res["explainable_map"].top_entry()
    return {"query": cohort.subject_ids[q], "task": task, "top_prototype": k,
            "top_stage": state.stage, "prediction": np.atleast_1d(res["prediction"]).tolist(),
            "representatives": {str(s): v for s, v in res["representatives"].items()},
            "tau": res["morph_diff"].tau, "outputs": str(edir)}


def cmd_run(cfg: RunConfig) -> dict:
    result = run_pipeline(cfg)
    return {t: {"mean": r.mean, "std": r.std, "errors": r.errors} for t, r in result.reports.items()}


COMMANDS = {
    "generate": cmd_generate,
    "train-adpen": cmd_train_adpen,
    "train-estimator": cmd_train_estimator,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
    "run": cmd_run,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protomap", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None, help="TOML run configuration")
        p.add_argument("--seed", type=int, default=None, help="override pipeline.seed")
        p.add_argument("--output", type=Path, default=None, help="override pipeline.output_dir")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        pipe = cfg.pipeline
        if args.seed is not None:
            pipe = dataclasses.replace(pipe, seed=args.seed)
        if args.output is not None:
            pipe = dataclasses.replace(pipe, output_dir=str(args.output))
        cfg = dataclasses.replace(cfg, pipeline=pipe)
        cfg.validate()
        summary = COMMANDS[args.command](cfg)
    except (ValidationError, FileNotFoundError) as exc:
        return _fail(args.command, exc, 2)
    except (UsageError, PipelineError) as exc:
        return _fail(args.command, exc, 3)
    except Exception as exc:
        return _fail(args.command, exc, 1)
    print(json.dumps(summary, indent=2, default=_jsonable))
    return 0


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _fail(command: str, exc: Exception, code: int) -> int:
    record = {"error": type(exc).__name__, "message": str(exc), "command": command}
    if isinstance(exc, PipelineError):
        record["records"] = exc.records
    print(json.dumps(record), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
