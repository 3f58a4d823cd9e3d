"""Run configuration: TOML file with one flat table per module, plus env overrides.

Sections and keys mirror the dataclasses below.  Any key can be overridden
with ``PROTOMAP_<SECTION>_<KEY>=<toml literal>``, e.g.
``PROTOMAP_ADPEN_EPOCHS=200`` or ``PROTOMAP_PIPELINE_TASKS='["cn_ad"]'``.
Unknown sections or keys are rejected.

Module seeds are not set directly: they are derived from ``pipeline.seed``
and the fold index.  ``cohort.seed`` defaults to ``pipeline.seed``.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import tomli

from .adpen import AdpenConfig
from .cohort import SyntheticSpec, ValidationError
from .likelihood import CaeConfig, EstimatorConfig

ENV_PREFIX = "PROTOMAP_"

# binary/multiclass scenarios: class index -> member stages (CN=0, sMCI=1, pMCI=2, AD=3)
SCENARIOS: dict[str, tuple[tuple[int, ...], ...]] = {
    "cn_ad": ((0,), (3,)),
    "cn_mci": ((0,), (1, 2)),
    "mci_ad": ((1, 2), (3,)),
    "smci_pmci": ((1,), (2,)),
    "cn_mci_ad": ((0,), (1, 2), (3,)),
    "stage4": ((0,), (1,), (2,), (3,)),
}
REGRESSION_TASKS = {"mmse": None, "age": (0,)}  # age uses healthy (CN) samples only


def task_kind(name: str) -> str:
    if name in SCENARIOS:
        return "classification"
    if name in REGRESSION_TASKS:
        return "regression"
    raise ValidationError(f"unknown task {name!r}; choose from {sorted(SCENARIOS) + sorted(REGRESSION_TASKS)}")


@dataclass
class CohortSection:
    path: str | None = None
    counts: tuple[int, ...] = (100, 100, 100, 100)
    mmse_mean: tuple[float, ...] = (29.0, 27.0, 25.0, 21.0)
    mmse_std: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)
    age_mean: tuple[float, ...] = (73.0, 74.0, 75.0, 76.0)
    age_std: tuple[float, ...] = (5.0, 5.0, 5.0, 5.0)
    imaging_dim: int = 64
    imaging_scale: float = 1.0
    continuous_gain: float = 1.0
    continuous_center: tuple[float, ...] = (0.0, 0.0)
    sigma_img: float = 0.05
    seed: int | None = None

    def spec(self, fallback_seed: int) -> SyntheticSpec:
        kw = dataclasses.asdict(self)
        kw.pop("path")
        kw["seed"] = fallback_seed if self.seed is None else self.seed
        return SyntheticSpec(**kw)


@dataclass
class PipelineSection:
    k: int = 5
    seed: int = 0
    folds: tuple[int, ...] | None = None   # subset of folds to run; None -> all
    fold: int = 0                           # fold used by single-fold CLI commands
    tasks: tuple[str, ...] = ("cn_ad", "stage4", "mmse")
    output_dir: str = "runs/default"
    gamma: str | float = "variance"         # pseudo-map temperature policy


@dataclass
class ExplainSection:
    query_index: int = 0
    n_nearest: int = 3
    per_stage: int = 3
    tau: float | None = None
    percentile: float = 60.0
    task: str | None = None


SECTIONS: dict[str, type] = {
    "cohort": CohortSection,
    "adpen": AdpenConfig,
    "cae": CaeConfig,
    "estimator": EstimatorConfig,
    "pipeline": PipelineSection,
    "explain": ExplainSection,
}
_DERIVED = {"adpen": {"seed"}, "cae": {"seed"}, "estimator": {"seed"}}


@dataclass
class RunConfig:
    cohort: CohortSection = field(default_factory=CohortSection)
    adpen: AdpenConfig = field(default_factory=AdpenConfig)
    cae: CaeConfig = field(default_factory=CaeConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    explain: ExplainSection = field(default_factory=ExplainSection)

    def validate(self) -> None:
        p = self.pipeline
        if p.k < 2:
            raise ValidationError("pipeline.k must be >= 2")
        if p.folds is not None and any(not 0 <= f < p.k for f in p.folds):
            raise ValidationError("pipeline.folds entries must lie in 0..k-1")
        if not 0 <= p.fold < p.k:
            raise ValidationError("pipeline.fold must lie in 0..k-1")
        if not p.tasks:
            raise ValidationError("pipeline.tasks must name at least one task")
        for t in p.tasks:
            task_kind(t)
        if self.cohort.path is None:
            self.cohort.spec(p.seed).validate()

    def seeded(self, fold: int) -> "RunConfig":
        """Copy with module seeds derived from the pipeline seed and ``fold``."""
        base = self.pipeline.seed * 1000 + fold
        return dataclasses.replace(
            self,
            adpen=dataclasses.replace(self.adpen, seed=base),
            cae=dataclasses.replace(self.cae, seed=base),
            estimator=dataclasses.replace(self.estimator, seed=base),
        )

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            d = dataclasses.asdict(getattr(self, name))
            for k in _DERIVED.get(name, ()):
                d.pop(k, None)
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        return out


def _coerce(cls: type, section: str, values: Mapping[str, Any]):
    allowed = {f.name for f in dataclasses.fields(cls)} - _DERIVED.get(section, set())
    unknown = set(values) - allowed
    if unknown:
        raise ValidationError(f"[{section}] unknown key(s): {sorted(unknown)}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    return cls(**kw)


def _parse_literal(text: str) -> Any:
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, dict[str, Any]]:
    environ = os.environ if environ is None else environ
    out: dict[str, dict[str, Any]] = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        section, _, key = rest.partition("_")
        if section not in SECTIONS or not key:
            raise ValidationError(f"environment override {name}: unknown section")
        out.setdefault(section, {})[key] = _parse_literal(raw)
    return out


def config_from_dict(data: Mapping[str, Mapping[str, Any]],
                     environ: Mapping[str, str] | None = None) -> RunConfig:
    unknown = set(data) - set(SECTIONS)
    if unknown:
        raise ValidationError(f"unknown config section(s): {sorted(unknown)}")
    merged = {s: dict(data.get(s, {})) for s in SECTIONS}
    for s, kv in env_overrides(environ).items():
        merged[s].update(kv)
    cfg = RunConfig(**{s: _coerce(SECTIONS[s], s, merged[s]) for s in SECTIONS})
    cfg.validate()
    return cfg


def load_config(path: str | Path | None = None,
                environ: Mapping[str, str] | None = None) -> RunConfig:
    data = {}
    if path is not None:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
    return config_from_dict(data, environ)
