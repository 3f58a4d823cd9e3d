"""Decoded prototype states, clinical explainable maps, prototypical samples and
morphological difference maps."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .adpen import PrototypeGrid, Topology, VaeModel, squared_distances
from .cohort import AGE_MAX, MMSE_MAX, STAGES, ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PrototypicalState:
    stage_probs: np.ndarray
    mmse: float   # normalised, [0, 1]
    age: float    # normalised, [0, 1]

    @property
    def stage(self) -> int:
        return int(np.argmax(self.stage_probs))

    @property
    def mmse_score(self) -> float:
        return self.mmse * MMSE_MAX

    @property
    def age_years(self) -> float:
        return self.age * AGE_MAX


def decode_prototypes(vae: VaeModel, grid: PrototypeGrid) -> list[PrototypicalState]:
    out = vae.decode(grid.prototypes)
    L = vae.n_stages
    return [PrototypicalState(row[:L].copy(), float(row[L]), float(row[L + 1])) for row in out]


@dataclass
class ExplainableMap:
    scores: np.ndarray
    states: list[PrototypicalState]
    topology: Topology

    def __len__(self) -> int:
        return len(self.states)

    def top_entry(self) -> tuple[int, PrototypicalState]:
        k = int(np.argmax(self.scores))
        return k, self.states[k]

    def to_dict(self, stage_names: Sequence[str] = STAGES) -> dict:
        entries = []
        for k, (s, st) in enumerate(zip(self.scores, self.states)):
            entries.append({
                "index": k, "score": float(s), "stage": stage_names[st.stage] if st.stage < len(stage_names) else st.stage,
                "stage_probs": st.stage_probs.tolist(), "mmse": st.mmse_score, "age": st.age_years,
                "mmse_unit": st.mmse, "age_unit": st.age,
            })
        return {"topology": self.topology.kind, "shape": list(self.topology.dims), "entries": entries}

    @classmethod
    def from_dict(cls, d: dict) -> "ExplainableMap":
        topo = Topology(d["topology"], tuple(d["shape"]))
        entries = sorted(d["entries"], key=lambda e: e["index"])
        states = [PrototypicalState(np.asarray(e["stage_probs"], dtype=float),
                                    float(e["mmse_unit"]), float(e["age_unit"])) for e in entries]
        return cls(np.array([e["score"] for e in entries], dtype=float), states, topo)


def build_clinical_map(rho_tilde: np.ndarray, states: Sequence[PrototypicalState],
                       topology: Topology | None = None) -> ExplainableMap:
    rho_tilde = np.asarray(rho_tilde, dtype=float).ravel()
    if len(rho_tilde) != len(states):
        raise ValidationError(f"{len(rho_tilde)} scores for {len(states)} prototypes")
    topology = topology or Topology("chain", (len(states),))
    if topology.size != len(states):
        raise ValidationError("topology size does not match the number of prototypes")
    return ExplainableMap(rho_tilde.copy(), list(states), topology)


@dataclass
class PrototypicalSampleSet:
    ids: list[np.ndarray]          # per prototype, sample positions ranked by distance
    distances: list[np.ndarray]
    averages: np.ndarray           # (K, D) mean imaging of the retrieved samples
    n_requested: int


def retrieve_nearest_samples(prototypes: np.ndarray | PrototypeGrid, latents: np.ndarray,
                             imaging: np.ndarray, n: int = 3) -> PrototypicalSampleSet:
    """Per prototype, the ``n`` training samples nearest in latent space.

    Ties are broken by lower sample position.  ``averages[k]`` is the
    element-wise mean of the retrieved imaging features.
    """
    P = prototypes.prototypes if isinstance(prototypes, PrototypeGrid) else np.asarray(prototypes)
    latents = np.atleast_2d(latents)
    imaging = np.atleast_2d(imaging)
    if len(latents) != len(imaging):
        raise ValidationError("latents and imaging must align")
    take = n
    if len(latents) < n:
        log.warning("only %d samples available; retrieving all of them per prototype", len(latents))
        take = len(latents)
    d = squared_distances(P, latents)  # (K, N)
    order = np.argsort(d, axis=1, kind="stable")[:, :take]
    ids = [row.copy() for row in order]
    dists = [d[k, row] for k, row in enumerate(order)]
    averages = np.stack([imaging[row].mean(axis=0) for row in order])
    return PrototypicalSampleSet(ids, dists, averages, n)


def select_stage_representatives(states: Sequence[PrototypicalState], query_age_years: float,
                                 per_stage: int = 3, n_stages: int | None = None
                                 ) -> dict[int, list[int]]:
    """For each decoded stage, the prototypes whose decoded age is nearest the query.

    Returns ``{stage: [prototype indices]}`` ordered by age gap, ties by index.
    """
    if not 0.0 < query_age_years <= AGE_MAX:
        raise ValidationError(f"query age {query_age_years} outside (0, 100]")
    n_stages = n_stages if n_stages is not None else len(states[0].stage_probs)
    stage_of = np.array([s.stage for s in states])
    gap = np.abs(np.array([s.age_years for s in states]) - query_age_years)
    chosen = {}
    for stage in range(n_stages):
        members = np.flatnonzero(stage_of == stage)
        if len(members) == 0:
            continue
        if len(members) < per_stage:
            log.warning("stage %d has only %d prototypes", stage, len(members))
        ranked = members[np.argsort(gap[members], kind="stable")]
        chosen[stage] = ranked[:per_stage].tolist()
    return chosen


@dataclass
class MorphDiffMap:
    prototype_ids: list[int]
    diffs: np.ndarray   # (len(prototype_ids), D)
    tau: float

    def to_csv(self, path: str | Path) -> None:
        D = self.diffs.shape[1]
        lines = ["prototype," + ",".join(f"f{j}" for j in range(D))]
        for k, row in zip(self.prototype_ids, self.diffs):
            lines.append(f"{k}," + ",".join(repr(float(v)) for v in row))
        Path(path).write_text("\n".join(lines) + "\n")


def morph_difference(query: np.ndarray, references: np.ndarray, tau: float | None = None,
                     prototype_ids: Sequence[int] | None = None,
                     percentile: float = 60.0) -> MorphDiffMap:
    """Signed ``query - reference`` per row; entries with ``|diff| < tau`` are zeroed.

    With ``tau=None`` the threshold is the given percentile of all ``|diff|``.
    """
    query = np.asarray(query, dtype=float)
    references = np.atleast_2d(np.asarray(references, dtype=float))
    if references.shape[1] != query.shape[-1]:
        raise ValidationError(
            f"query has {query.shape[-1]} features, references have {references.shape[1]}")
    diffs = query[None, :] - references
    if tau is None:
        tau = float(np.percentile(np.abs(diffs), percentile))
    diffs = np.where(np.abs(diffs) < tau, 0.0, diffs)
    ids = list(range(len(references))) if prototype_ids is None else [int(i) for i in prototype_ids]
    return MorphDiffMap(ids, diffs, float(tau))


def save_explainable_map(emap: ExplainableMap, path: str | Path) -> None:
    Path(path).write_text(json.dumps(emap.to_dict()))


def load_explainable_map(path: str | Path) -> ExplainableMap:
    return ExplainableMap.from_dict(json.loads(Path(path).read_text()))
