"""Clinical records, synthetic AD-spectrum cohorts, stratified folds, ordering pairs."""
from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

STAGES = ("CN", "sMCI", "pMCI", "AD")
MMSE_MAX = 30.0
AGE_MAX = 100.0


class ValidationError(ValueError):
    pass


@dataclass(frozen=True)
class ClinicalRecord:
    stage: int
    mmse_raw: int
    age_years: float

    def validate(self, n_stages: int = len(STAGES)) -> None:
        if not 0 <= self.stage < n_stages:
            raise ValidationError(f"stage {self.stage} outside 0..{n_stages - 1}")
        if not 0 <= self.mmse_raw <= 30 or int(self.mmse_raw) != self.mmse_raw:
            raise ValidationError(f"mmse {self.mmse_raw} must be an integer in [0, 30]")
        if not 0.0 < self.age_years <= AGE_MAX:
            raise ValidationError(f"age {self.age_years} outside (0, 100]")


def normalize_clinical(record: ClinicalRecord, n_stages: int = len(STAGES)) -> np.ndarray:
    """Composite vector ``[one-hot stage, mmse/30, age/100]``."""
    record.validate(n_stages)
    c = np.zeros(n_stages + 2)
    c[record.stage] = 1.0
    c[n_stages] = record.mmse_raw / MMSE_MAX
    c[n_stages + 1] = record.age_years / AGE_MAX
    return c


def denormalize_clinical(c: Sequence[float], n_stages: int = len(STAGES)) -> ClinicalRecord:
    c = np.asarray(c, dtype=float)
    if c.shape != (n_stages + 2,):
        raise ValidationError(f"expected vector of length {n_stages + 2}, got {c.shape}")
    return ClinicalRecord(stage=int(np.argmax(c[:n_stages])),
                          mmse_raw=int(round(c[n_stages] * MMSE_MAX)),
                          age_years=float(c[n_stages + 1] * AGE_MAX))


@dataclass(frozen=True)
class ImagingSample:
    features: np.ndarray
    subject_id: str
    acquisition_index: int = 0


@dataclass
class SyntheticSpec:
    """Recipe for a synthetic cohort.

    Imaging features are ``tanh(A @ (c - c0)) + N(0, sigma_img^2)`` where ``A``
    is a seeded Gaussian matrix of shape ``(imaging_dim, L + 2)`` scaled by
    ``imaging_scale``.  ``c0`` is zero on the stage block and
    ``continuous_center`` on the score/age entries, and the score/age columns
    of ``A`` are multiplied by ``continuous_gain``.  The defaults (no shift,
    gain 1) give plain ``tanh(A @ c)``; the two knobs strengthen within-stage
    signal when a harder cohort needs it.
    """

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
    seed: int = 0
    stage_names: tuple[str, ...] = STAGES

    def validate(self) -> None:
        n = len(self.stage_names)
        for name in ("counts", "mmse_mean", "mmse_std", "age_mean", "age_std"):
            if len(getattr(self, name)) != n:
                raise ValidationError(f"{name} needs one entry per stage ({n})")
        if any(c < 0 for c in self.counts):
            raise ValidationError("stage counts must be >= 0")
        means = np.asarray(self.mmse_mean, dtype=float)
        if np.any(np.diff(means) >= 0):
            raise ValidationError("MMSE means must strictly decrease from first to last stage")
        if self.sigma_img < 0:
            raise ValidationError("sigma_img must be >= 0")
        if self.imaging_dim < 1:
            raise ValidationError("imaging_dim must be >= 1")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


@dataclass
class Cohort:
    records: list[ClinicalRecord]
    clinical: np.ndarray           # (N, L+2)
    imaging: np.ndarray            # (N, D)
    subject_ids: list[str]
    acquisition_index: np.ndarray  # (N,)
    n_stages: int = len(STAGES)
    spec: SyntheticSpec | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.records)
        if not (self.clinical.shape[0] == self.imaging.shape[0] == len(self.subject_ids)
                == len(self.acquisition_index) == n):
            raise ValidationError("cohort arrays are misaligned")
        if not np.all(np.isfinite(self.imaging)):
            raise ValidationError("imaging features must be finite")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def stages(self) -> np.ndarray:
        return np.array([r.stage for r in self.records], dtype=int)

    @property
    def mmse(self) -> np.ndarray:
        return np.array([r.mmse_raw for r in self.records], dtype=float)

    @property
    def ages(self) -> np.ndarray:
        return np.array([r.age_years for r in self.records], dtype=float)

    def imaging_sample(self, i: int) -> ImagingSample:
        return ImagingSample(self.imaging[i], self.subject_ids[i], int(self.acquisition_index[i]))

    def subset(self, idx: Iterable[int]) -> "Cohort":
        idx = np.asarray(list(idx), dtype=int)
        return Cohort(records=[self.records[i] for i in idx], clinical=self.clinical[idx],
                      imaging=self.imaging[idx], subject_ids=[self.subject_ids[i] for i in idx],
                      acquisition_index=self.acquisition_index[idx], n_stages=self.n_stages,
                      spec=self.spec, meta=dict(self.meta))

    def require_stages(self, stages: Iterable[int]) -> None:
        counts = np.bincount(self.stages, minlength=self.n_stages)
        missing = [s for s in stages if counts[s] == 0]
        if missing:
            raise ValidationError(f"no samples for stage(s) {missing}")


def imaging_matrix(spec: SyntheticSpec) -> np.ndarray:
    L = len(spec.stage_names)
    rng = np.random.default_rng([spec.seed, 1])
    A = rng.normal(0.0, spec.imaging_scale, size=(spec.imaging_dim, L + 2))
    A[:, L:] *= spec.continuous_gain
    return A


def imaging_features(clinical: np.ndarray, A: np.ndarray,
                     center: Sequence[float] = (0.0, 0.0)) -> np.ndarray:
    """Noise-free part of the synthetic imaging map, row-wise."""
    shifted = np.array(clinical, dtype=float, copy=True)
    shifted[:, -2:] -= np.asarray(center, dtype=float)
    return np.tanh(shifted @ A.T)


def generate_cohort(spec: SyntheticSpec, require_all_stages: bool = True) -> Cohort:
    spec.validate()
    L = len(spec.stage_names)
    if require_all_stages and any(c == 0 for c in spec.counts):
        raise ValidationError("every stage needs a positive count")
    rng = np.random.default_rng([spec.seed, 0])
    records = []
    for stage, n in enumerate(spec.counts):
        mmse = rng.normal(spec.mmse_mean[stage], spec.mmse_std[stage], size=n)
        mmse = np.clip(np.rint(mmse), 0, 30).astype(int)
        age = rng.normal(spec.age_mean[stage], spec.age_std[stage], size=n)
        age = np.clip(age, 1.0, AGE_MAX)
        records.extend(ClinicalRecord(stage, int(m), float(a)) for m, a in zip(mmse, age))
    clinical = np.stack([normalize_clinical(r, L) for r in records])
    A = imaging_matrix(spec)
    imaging = imaging_features(clinical, A, spec.continuous_center)
    if spec.sigma_img > 0:
        imaging = imaging + rng.normal(0.0, spec.sigma_img, size=imaging.shape)
    n = len(records)
    return Cohort(records=records, clinical=clinical, imaging=imaging,
                  subject_ids=[f"S{i:05d}" for i in range(n)],
                  acquisition_index=np.zeros(n, dtype=int), n_stages=L, spec=spec)


def longitudinal_series(spec: SyntheticSpec, start: ClinicalRecord, n_visits: int,
                        stage_path: Sequence[int] | None = None, mmse_drop: float = 1.0,
                        years_per_visit: float = 1.0, subject_id: str = "L00000") -> Cohort:
    """One synthetic subject followed over ``n_visits`` acquisitions.

    Age advances by ``years_per_visit``; MMSE falls by ``mmse_drop`` per visit;
    ``stage_path`` optionally gives the diagnosed stage at each visit.
    """
    L = len(spec.stage_names)
    A = imaging_matrix(spec)
    rng = np.random.default_rng([spec.seed, 2, zlib.crc32(subject_id.encode())])
    records = []
    for v in range(n_visits):
        stage = start.stage if stage_path is None else int(stage_path[v])
        mmse = int(np.clip(round(start.mmse_raw - mmse_drop * v), 0, 30))
        age = min(start.age_years + years_per_visit * v, AGE_MAX)
        records.append(ClinicalRecord(stage, mmse, age))
    clinical = np.stack([normalize_clinical(r, L) for r in records])
    imaging = imaging_features(clinical, A, spec.continuous_center)
    if spec.sigma_img > 0:
        imaging = imaging + rng.normal(0.0, spec.sigma_img, size=imaging.shape)
    return Cohort(records=records, clinical=clinical, imaging=imaging,
                  subject_ids=[subject_id] * n_visits,
                  acquisition_index=np.arange(n_visits), n_stages=L, spec=spec)


# serialization ---------------------------------------------------------------

def save_cohort(cohort: Cohort, path: str | Path) -> None:
    """Newline-delimited JSON; one object per sample.

    Keys: ``stage`` (int), ``mmse`` (int 0-30), ``age`` (years), ``features``
    (list of floats), ``subject_id`` (str), ``acquisition_index`` (int).
    """
    with open(path, "w") as fh:
        for i, r in enumerate(cohort.records):
            fh.write(json.dumps({
                "stage": r.stage, "mmse": r.mmse_raw, "age": r.age_years,
                "features": cohort.imaging[i].tolist(), "subject_id": cohort.subject_ids[i],
                "acquisition_index": int(cohort.acquisition_index[i]),
            }) + "\n")


def load_cohort(path: str | Path, n_stages: int = len(STAGES)) -> Cohort:
    records, feats, ids, acq = [], [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            row = json.loads(line)
            missing = {"stage", "mmse", "age", "features", "subject_id"} - row.keys()
            if missing:
                raise ValidationError(f"line {lineno}: missing fields {sorted(missing)}")
            r = ClinicalRecord(int(row["stage"]), row["mmse"], float(row["age"]))
            try:
                r.validate(n_stages)
            except ValidationError as e:
                raise ValidationError(f"line {lineno}: {e}") from None
            r = ClinicalRecord(r.stage, int(r.mmse_raw), r.age_years)
            f = np.asarray(row["features"], dtype=float)
            if feats and f.shape != feats[0].shape:
                raise ValidationError(f"line {lineno}: feature dimension {f.shape} differs")
            records.append(r)
            feats.append(f)
            ids.append(str(row["subject_id"]))
            acq.append(int(row.get("acquisition_index", 0)))
    if not records:
        raise ValidationError(f"{path}: empty cohort file")
    clinical = np.stack([normalize_clinical(r, n_stages) for r in records])
    return Cohort(records=records, clinical=clinical, imaging=np.stack(feats), subject_ids=ids,
                  acquisition_index=np.asarray(acq, dtype=int), n_stages=n_stages)


# splitting -------------------------------------------------------------------

def stratified_kfold(labels: Sequence[int], k: int, seed: int = 0
                     ) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Stratified k-fold split into (train, validation, test) index arrays.

    Samples are shuffled within each class and dealt round-robin into slots,
    continuing the deal position across classes, so every slot holds floor or
    ceil of each class's share.  For ``k >= 3`` there are ``k`` slots: fold
    ``i`` tests on slot ``i``, validates on slot ``(i + 1) % k`` and trains on
    the rest.  For ``k == 2`` there are four slots: fold ``i`` tests on slots
    ``i`` and ``i + 2``, validates on slot ``(i + 1) % 4`` and trains on the
    remaining one.
    """
    labels = np.asarray(labels, dtype=int)
    if k < 2:
        raise ValidationError("k must be >= 2")
    classes, counts = np.unique(labels, return_counts=True)
    if np.any(counts < k):
        bad = classes[counts < k].tolist()
        raise ValidationError(f"class(es) {bad} have fewer than k={k} samples")
    n_slots = 4 if k == 2 else k
    rng = np.random.default_rng(seed)
    slot = np.empty(len(labels), dtype=int)
    pos = 0
    for c in classes:
        idx = rng.permutation(np.flatnonzero(labels == c))
        slot[idx] = (pos + np.arange(len(idx))) % n_slots
        pos = (pos + len(idx)) % n_slots
    folds = []
    for i in range(k):
        is_test = slot % k == i
        is_val = slot == (i + 1) % n_slots
        folds.append((np.flatnonzero(~is_test & ~is_val), np.flatnonzero(is_val),
                      np.flatnonzero(is_test)))
    return folds


def sample_ordering_pairs(stages: Sequence[int], rng: np.random.Generator,
                          n_stages: int = len(STAGES)) -> np.ndarray:
    """Pair every anchor with a uniformly drawn partner of the next stage.

    Works within the given batch.  Anchors at the last stage, or whose next
    stage is absent from the batch, produce no pair.  Returns an ``(P, 2)``
    array of (anchor, partner) batch positions.
    """
    stages = np.asarray(stages, dtype=int)
    by_stage = {s: np.flatnonzero(stages == s) for s in range(n_stages)}
    pairs = []
    skipped = 0
    for i, s in enumerate(stages):
        if s >= n_stages - 1:
            continue
        partners = by_stage[s + 1]
        if len(partners) == 0:
            skipped += 1
            continue
        pairs.append((i, int(partners[rng.integers(len(partners))])))
    if skipped:
        log.debug("ordering pairs: %d anchors had no next-stage partner in batch", skipped)
    return np.asarray(pairs, dtype=int).reshape(-1, 2)
