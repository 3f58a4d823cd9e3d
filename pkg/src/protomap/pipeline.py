"""Cross-validated experiment orchestration and artifact export."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .adpen import (AdpenModel, AdpenResult, TrainLog, bmu_index, finetune_som, quantization_error,
                    save_adpen, topographic_error, train_adpen)
from .autodiff import UsageError
from .cohort import Cohort, generate_cohort, load_cohort, stratified_kfold
from .config import REGRESSION_TASKS, SCENARIOS, RunConfig, task_kind
from .explain import (build_clinical_map, decode_prototypes, morph_difference,
                      retrieve_nearest_samples, select_stage_representatives)
from .likelihood import (ConsistencyCae, EstimatorStack, LikelihoodMap,
                         cae_to_dict, estimator_to_dict, pretrain_cae, pseudo_values, save_json,
                         train_estimator)
from .metrics import MetricsReport, classification_metrics, regression_metrics, write_reports

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    def __init__(self, message: str, records: list[dict] | None = None):
        super().__init__(message)
        self.records = records or []


def load_or_generate_cohort(cfg: RunConfig) -> Cohort:
    if cfg.cohort.path:
        return load_cohort(cfg.cohort.path)
    return generate_cohort(cfg.cohort.spec(cfg.pipeline.seed))


def task_targets(cohort: Cohort, task: str, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
    """Restrict ``idx`` to the samples a task uses and return (idx, targets, n_outputs)."""
    stages = cohort.stages
    if task in SCENARIOS:
        groups = SCENARIOS[task]
        label_of = {s: c for c, members in enumerate(groups) for s in members}
        keep = np.array([stages[i] in label_of for i in idx], dtype=bool)
        idx = idx[keep]
        return idx, np.array([label_of[stages[i]] for i in idx], dtype=int), len(groups)
    if task == "mmse":
        return idx, cohort.mmse[idx] / 30.0, 1
    if task == "age":
        healthy = REGRESSION_TASKS["age"]
        idx = idx[np.isin(stages[idx], healthy)]
        return idx, cohort.ages[idx] / 100.0, 1
    raise ValueError(task)


@dataclass
class AdpenStage:
    model: AdpenModel
    result: AdpenResult
    finetune_log: TrainLog
    diagnostics: dict


def run_adpen_stage(cohort: Cohort, train_idx: np.ndarray, cfg: RunConfig) -> AdpenStage:
    train = cohort.subset(train_idx)
    result = train_adpen(train, cfg.adpen)
    model = result.model
    ft_log = finetune_som(model, train)
    mu = model.latents(train.clinical)
    var = float(mu.var(axis=0).sum())
    proj = model.head.project(mu)
    stage_means = [float(proj[train.stages == s].mean()) for s in np.unique(train.stages)]
    diag = {
        "qe_initial": result.initial_qe,
        "qe_final": quantization_error(mu, model.grid),
        "qe_initial_normalized": result.initial_qe_normalized,
        "qe_final_normalized": quantization_error(mu, model.grid) / var,
        "te_initial": result.initial_te,
        "te_final": topographic_error(mu, model.grid),
        "order_stage_means": stage_means,
        "order_spearman": float(spearmanr(np.arange(len(stage_means)), stage_means)[0]),
    }
    return AdpenStage(model, result, ft_log, diag)


def cohort_pseudo_maps(model: AdpenModel, cohort: Cohort, gamma="variance") -> tuple[np.ndarray, np.ndarray]:
    """Inference latents and cached pseudo maps for every sample."""
    mu = model.latents(cohort.clinical)
    return mu, pseudo_values(mu, model.grid.prototypes, gamma)


def evaluate_task(stack: EstimatorStack, cae: ConsistencyCae, cohort: Cohort, idx: np.ndarray,
                  targets: np.ndarray, rho: np.ndarray) -> tuple[dict, np.ndarray, np.ndarray]:
    rho_t, out = stack.predict(cae, cohort.imaging[idx])
    if stack.task == "classification":
        metrics = classification_metrics(out, targets)
    else:
        metrics = regression_metrics(out, targets)
    metrics["map_mae"] = float(np.abs(rho_t - rho[idx]).mean())
    return metrics, rho_t, out


@dataclass
class FoldOutcome:
    fold: int
    metrics: dict[str, dict] = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    error: dict | None = None


@dataclass
class PipelineResult:
    reports: dict[str, MetricsReport]
    folds: list[FoldOutcome]

    def report(self, task: str) -> MetricsReport:
        return self.reports[task]

    def to_dict(self) -> dict:
        return {t: r.to_dict() for t, r in self.reports.items()}


def run_fold(cohort: Cohort, split, fold: int, cfg: RunConfig, out_dir: Path | None) -> FoldOutcome:
    cfg = cfg.seeded(fold)
    train_idx, val_idx, test_idx = split
    outcome = FoldOutcome(fold)
    stage = "adpen"
    try:
        t0 = time.perf_counter()
        adpen = run_adpen_stage(cohort, train_idx, cfg)
        outcome.diagnostics.update(adpen.diagnostics)
        stage = "pseudo_maps"
        mu, rho = cohort_pseudo_maps(adpen.model, cohort, cfg.pipeline.gamma)
        outcome.diagnostics["pseudo_argmax_matches_bmu"] = float(
            np.mean(np.argmax(rho, axis=1) == bmu_index(mu, adpen.model.grid)))
        stage = "cae"
        cae, cae_log = pretrain_cae(rho[train_idx], cfg.cae)
        if out_dir is not None:
            fdir = out_dir / f"fold_{fold}"
            fdir.mkdir(parents=True, exist_ok=True)
            save_adpen(adpen.model, fdir / "adpen.json")
            adpen.result.log.to_csv(fdir / "adpen_curve.csv")
            adpen.finetune_log.to_csv(fdir / "finetune_curve.csv")
            save_json(cae_to_dict(cae), fdir / "cae.json")
            cae_log.to_csv(fdir / "cae_curve.csv")
        for task in cfg.pipeline.tasks:
            stage = f"estimator:{task}"
            kind = task_kind(task)
            tr, y_tr, n_out = task_targets(cohort, task, train_idx)
            va, y_va, _ = task_targets(cohort, task, val_idx)
            te, y_te, _ = task_targets(cohort, task, test_idx)
            res = train_estimator(cohort.imaging[tr], rho[tr], y_tr, cae, kind, max(n_out, 2) if kind == "classification" else 1,
                                  cfg.estimator, cohort.imaging[va], y_va, rho[va], adpen=adpen.model)
            stage = f"evaluate:{task}"
            metrics, rho_t, out = evaluate_task(res.stack, cae, cohort, te, y_te, rho)
            metrics["best_epoch"] = float(res.best_epoch)
            outcome.metrics[task] = metrics
            if out_dir is not None:
                save_json(estimator_to_dict(res.stack), fdir / f"estimator_{task}.json")
                res.log.to_csv(fdir / f"estimator_{task}_curve.csv")
                topo = adpen.model.grid.topology
                maps = [{"subject_id": cohort.subject_ids[i],
                         "pseudo": LikelihoodMap(rho[i], topo, "pseudo").to_dict(),
                         "estimated": LikelihoodMap(rho_t[j], topo, "estimated").to_dict()}
                        for j, i in enumerate(te)]
                save_json({"task": task, "maps": maps}, fdir / f"maps_{task}.json")
        outcome.diagnostics["seconds"] = time.perf_counter() - t0
    except Exception as exc:  # a failed fold is recorded, the others still run
        log.exception("fold %d failed during %s", fold, stage)
        outcome.error = {"fold": fold, "stage": stage, "error": type(exc).__name__,
                         "message": str(exc)}
    return outcome


def run_pipeline(cfg: RunConfig, write: bool = True) -> PipelineResult:
    """Stratified k-fold: per fold train ADPEN, fine-tune the grid, cache pseudo
    maps, pretrain the CAE, train and test one estimator per task."""
    cfg.validate()
    cohort = load_or_generate_cohort(cfg)
    splits = stratified_kfold(cohort.stages, cfg.pipeline.k, seed=cfg.pipeline.seed)
    folds = range(cfg.pipeline.k) if cfg.pipeline.folds is None else cfg.pipeline.folds
    out_dir = Path(cfg.pipeline.output_dir) if write else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    outcomes = [run_fold(cohort, splits[f], f, cfg, out_dir) for f in folds]
    errors = [o.error for o in outcomes if o.error]
    if len(errors) == len(outcomes):
        raise PipelineError("every fold failed", errors)
    reports = {}
    for task in cfg.pipeline.tasks:
        rep = MetricsReport(task, errors=list(errors))
        for o in outcomes:
            if o.error is None:
                rep.folds.append(o.fold)
                rep.per_fold.append(o.metrics[task])
        reports[task] = rep
    result = PipelineResult(reports, outcomes)
    if out_dir is not None:
        write_reports(list(reports.values()), out_dir / "metrics.json", out_dir / "metrics.csv")
        (out_dir / "diagnostics.json").write_text(json.dumps(
            [{"fold": o.fold, **o.diagnostics, "error": o.error} for o in outcomes], indent=2))
    return result


# single-fold helpers used by the CLI ------------------------------------------

def explain_sample(model: AdpenModel, stack: EstimatorStack, cae: ConsistencyCae, cohort: Cohort,
                   train_idx: np.ndarray, query: int, n_nearest: int = 3, per_stage: int = 3,
                   tau: float | None = None, percentile: float = 60.0) -> dict:
    """Clinical explainable map and morphological differences for one sample."""
    if cae is None:
        raise UsageError("explaining an estimated map needs the CAE")
    states = decode_prototypes(model.vae, model.grid)
    rho_t, out = stack.predict(cae, cohort.imaging[query])
    emap = build_clinical_map(rho_t[0], states, model.grid.topology)
    train_latents = model.latents(cohort.clinical[train_idx])
    samples = retrieve_nearest_samples(model.grid, train_latents, cohort.imaging[train_idx], n_nearest)
    reps = select_stage_representatives(states, cohort.records[query].age_years, per_stage,
                                        cohort.n_stages)
    chosen = [k for stage in sorted(reps) for k in reps[stage]]
    diff = morph_difference(cohort.imaging[query], samples.averages[chosen], tau,
                            prototype_ids=chosen, percentile=percentile)
    return {"explainable_map": emap, "prediction": out[0], "representatives": reps,
            "morph_diff": diff, "samples": samples,
            "nearest_ids": {k: [cohort.subject_ids[train_idx[i]] for i in samples.ids[k]]
                            for k in chosen}}
