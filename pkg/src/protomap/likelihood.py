"""Likelihood maps over the prototype grid and the imaging-side estimator.

A *pseudo* map comes from a clinical latent: a temperature softmax of negative
latent-to-prototype distances, min-max normalised.  An *estimated* map comes
from imaging features through an extractor and a sigmoid head, and is trained
to agree with the pseudo map both entrywise and in the code space of a frozen
map autoencoder (the consistency encoder), alongside a downstream task head.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, MLP, Adam, LrSchedule, lr_at, TrainingError, UsageError
from .adpen import AdpenModel, PrototypeGrid, Topology, squared_distances, TrainLog
from .cohort import ValidationError

log = logging.getLogger(__name__)


# pseudo maps -------------------------------------------------------------------

@dataclass
class LikelihoodMap:
    values: np.ndarray
    topology: Topology
    kind: str = "pseudo"  # or "estimated"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.topology.size,):
            raise ValidationError(
                f"map has {self.values.shape} values, topology needs {self.topology.size}")
        if self.kind not in ("pseudo", "estimated"):
            raise ValidationError(f"unknown map kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "topology": self.topology.kind,
                "shape": list(self.topology.dims), "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "LikelihoodMap":
        return cls(np.asarray(d["values"]), Topology(d["topology"], tuple(d["shape"])), d["kind"])

    def grid_values(self) -> np.ndarray:
        return self.values.reshape(self.topology.dims)


def resolve_temperature(distances: np.ndarray) -> np.ndarray | float:
    """Population std of the K distances (per row); 1.0 where that std is < 1e-12."""
    d = np.asarray(distances, dtype=float)
    if d.shape[-1] < 2:
        raise ValidationError("temperature needs at least two distances")
    g = d.std(axis=-1)
    g = np.where(g < 1e-12, 1.0, g)
    return float(g) if d.ndim == 1 else g


def minmax_normalize(v: np.ndarray) -> np.ndarray:
    """Row-wise (v - min) / (max - min); rows with range < 1e-12 pass through."""
    v = np.asarray(v, dtype=float)
    lo = v.min(axis=-1, keepdims=True)
    span = v.max(axis=-1, keepdims=True) - lo
    flat = span < 1e-12
    return np.where(flat, v, (v - lo) / np.where(flat, 1.0, span))


def softmax_map(distances: np.ndarray, gamma) -> np.ndarray:
    d = np.asarray(distances, dtype=float)
    g = np.asarray(gamma, dtype=float)
    z = -d / (g[..., None] if g.ndim else g)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def pseudo_values(h: np.ndarray, prototypes: np.ndarray, gamma: float | str = "variance",
                  normalize: bool = True) -> np.ndarray:
    """Pseudo-likelihood rows for latents ``h`` (N, M) against prototypes (K, M).

    ``gamma`` is a positive number or ``"variance"`` (per-sample distance std).
    """
    d = squared_distances(np.atleast_2d(h), prototypes)
    if isinstance(gamma, str):
        if gamma != "variance":
            raise ValidationError(f"unknown temperature policy {gamma!r}")
        g = resolve_temperature(d)
    else:
        g = float(gamma)
        if g <= 0:
            log.warning("non-positive temperature %r; falling back to 1.0", gamma)
            g = 1.0
    rho = softmax_map(d, g)
    return minmax_normalize(rho) if normalize else rho


def pseudo_map(h: np.ndarray, grid: PrototypeGrid, gamma: float | str = "variance") -> LikelihoodMap:
    return LikelihoodMap(pseudo_values(h, grid.prototypes, gamma)[0], grid.topology, "pseudo")


# networks ----------------------------------------------------------------------

class ConsistencyCae:
    """Dense map autoencoder K -> hidden -> code -> hidden -> K (sigmoid output)."""

    def __init__(self, K: int, hidden: int = 32, code: int = 16,
                 rng: np.random.Generator | None = None):
        if code >= K:
            raise ValidationError("CAE code must be smaller than the map")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.K = K
        self.hidden = hidden
        self.code = code
        self.encoder = MLP([K, hidden, code], hidden="relu", out_activation="identity",
                           rng=rng, name="cae.enc")
        self.decoder = MLP([code, hidden, K], hidden="relu", out_activation="sigmoid",
                           rng=rng, name="cae.dec")
        self.trained = False

    def parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + self.decoder.parameters()

    def encode(self, rho) -> Tensor:
        return self.encoder(rho)

    def reconstruct(self, rho) -> Tensor:
        return self.decoder(self.encoder(rho))

    def reconstruction_mse(self, maps: np.ndarray) -> float:
        out = self.reconstruct(maps).data
        return float(((out - maps) ** 2).sum(axis=1).mean())


@dataclass
class CaeConfig:
    hidden: int = 32
    code: int = 16
    epochs: int = 200
    n_batches: int = 4
    lr: float = 1e-3
    seed: int = 0


def pretrain_cae(maps: np.ndarray, config: CaeConfig | None = None) -> tuple[ConsistencyCae, TrainLog]:
    """Fit the map autoencoder on ``maps`` (N, K) by summed squared error."""
    config = config or CaeConfig()
    maps = np.atleast_2d(np.asarray(maps, dtype=float))
    if len(maps) == 0:
        raise ValidationError("need at least one training map")
    rng = np.random.default_rng([config.seed, 11])
    cae = ConsistencyCae(maps.shape[1], config.hidden, config.code, rng=rng)
    opt = Adam(cae.parameters())
    n_batches = max(1, min(config.n_batches, len(maps)))
    train_log = TrainLog()
    for epoch in range(config.epochs):
        for b in np.array_split(rng.permutation(len(maps)), n_batches):
            x = maps[b]
            loss = ad.square(cae.reconstruct(x) - x).sum()
            if not math.isfinite(loss.item()):
                raise TrainingError(f"CAE loss non-finite at epoch {epoch}")
            opt.zero_grad()
            ad.backprop(loss)
            opt.step(config.lr)
        train_log.append(epoch=epoch, mse=cae.reconstruction_mse(maps))
    ad.set_trainable(cae.parameters(), False)
    cae.trained = True
    return cae, train_log


TASKS = ("classification", "regression")


class EstimatorStack:
    """Imaging extractor, map estimator and task head.

    The extractor is any callable ``features -> z`` exposing ``parameters()``;
    the default dense stack ``D -> 128 -> latent`` (ReLU) can be swapped out
    without touching the losses.
    """

    def __init__(self, input_dim: int, K: int, code_dim: int, task: str = "classification",
                 n_classes: int = 2, latent: int = 64, extractor_hidden: int = 128,
                 estimator_hidden: int = 256, head_hidden: int = 64,
                 rng: np.random.Generator | None = None):
        if task not in TASKS:
            raise ValidationError(f"unknown task {task!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_dim = input_dim
        self.K = K
        self.task = task
        self.n_classes = n_classes
        self.sizes = dict(latent=latent, extractor_hidden=extractor_hidden,
                          estimator_hidden=estimator_hidden, head_hidden=head_hidden)
        self.extractor = MLP([input_dim, extractor_hidden, latent], hidden="relu",
                             out_activation="relu", rng=rng, name="est.extractor")
        self.estimator = MLP([latent, estimator_hidden, K], hidden="relu",
                             out_activation="identity", rng=rng, name="est.map")
        n_out = n_classes if task == "classification" else 1
        self.head = MLP([code_dim, head_hidden, n_out], hidden="relu",
                        out_activation="identity", rng=rng, name="est.head")

    def parameters(self) -> list[Tensor]:
        return self.extractor.parameters() + self.estimator.parameters() + self.head.parameters()

    def map_t(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.atleast_2d(np.asarray(x, dtype=float)))
        if x.shape[-1] != self.input_dim:
            raise ValidationError(f"imaging has {x.shape[-1]} features, estimator expects {self.input_dim}")
        return ad.sigmoid(self.estimator(self.extractor(x)))

    def head_logits_t(self, cae: ConsistencyCae, rho_tilde: Tensor) -> Tensor:
        return self.head(cae.encode(rho_tilde))

    def predict(self, cae: ConsistencyCae, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Estimated maps and task output (class probabilities or scalar in [0, 1])."""
        rho_t = self.map_t(np.atleast_2d(x))
        logits = self.head_logits_t(cae, rho_t).data
        if self.task == "classification":
            z = logits - logits.max(axis=1, keepdims=True)
            e = np.exp(z)
            out = e / e.sum(axis=1, keepdims=True)
        else:
            out = 1.0 / (1.0 + np.exp(-logits[:, 0]))
        return rho_t.data, out


def estimate_map(stack: EstimatorStack, features: np.ndarray, topology: Topology) -> LikelihoodMap:
    rho_t = stack.map_t(np.atleast_2d(np.asarray(features, dtype=float))).data[0]
    return LikelihoodMap(rho_t, topology, "estimated")


# losses ------------------------------------------------------------------------

def est_loss_t(rho: np.ndarray | Tensor, rho_tilde: Tensor) -> Tensor:
    """Per-sample L1 + squared L2 of the map difference, shape (N,)."""
    diff = ad.as_tensor(rho_tilde) - rho
    return ad.tabs(diff).sum(axis=-1) + ad.square(diff).sum(axis=-1)


def est_loss(rho, rho_tilde) -> float:
    rho = np.asarray(rho, dtype=float)
    rho_tilde = np.asarray(rho_tilde, dtype=float)
    if rho.shape != rho_tilde.shape:
        raise ValidationError("maps must have equal shapes")
    d = rho - rho_tilde
    return float(np.abs(d).sum() + (d ** 2).sum())


def cons_loss_t(cae: ConsistencyCae, rho: np.ndarray, rho_tilde: Tensor) -> Tensor:
    if not cae.trained:
        raise UsageError("consistency loss needs a pretrained CAE")
    target = cae.encode(np.atleast_2d(rho)).data
    return est_loss_t(target, cae.encode(rho_tilde))


def cons_loss(cae: ConsistencyCae, rho, rho_tilde) -> float:
    rho_tilde = Tensor(np.atleast_2d(np.asarray(rho_tilde, dtype=float)))
    return float(cons_loss_t(cae, np.asarray(rho, dtype=float), rho_tilde).data.sum())


def task_loss_t(logits: Tensor, target: np.ndarray, task: str) -> Tensor:
    """Per-sample cross-entropy (integer labels) or squared error (targets in [0, 1])."""
    if task == "classification":
        target = np.asarray(target, dtype=int)
        n_classes = logits.shape[1]
        if np.any(target < 0) or np.any(target >= n_classes):
            raise ValidationError(f"label outside 0..{n_classes - 1}")
        onehot = np.eye(n_classes)[target]
        return -(ad.log_softmax(logits, axis=1) * onehot).sum(axis=1)
    pred = ad.sigmoid(logits[:, 0])
    return ad.square(pred - np.asarray(target, dtype=float))


def task_loss(prediction: np.ndarray, target, task: str = "classification") -> float:
    """Loss on an already-computed prediction (probabilities, or a value)."""
    if task == "classification":
        p = np.atleast_2d(np.asarray(prediction, dtype=float))
        t = np.atleast_1d(np.asarray(target, dtype=int))
        if np.any(t < 0) or np.any(t >= p.shape[1]):
            raise ValidationError(f"label outside 0..{p.shape[1] - 1}")
        picked = p[np.arange(len(t)), t]
        return float(-np.log(picked).mean())
    pred = np.asarray(prediction, dtype=float)
    return float(np.mean((pred - np.asarray(target, dtype=float)) ** 2))


@dataclass
class LossWeights:
    lambda2: float = 1.0
    lambda3: float = 1.0


def total_loss_t(stack: EstimatorStack, cae: ConsistencyCae, x: np.ndarray, rho: np.ndarray,
                 target: np.ndarray, weights: LossWeights) -> tuple[Tensor, dict]:
    """Batch mean of est + lambda2 * cons + lambda3 * task."""
    rho_t = stack.map_t(x)
    l_est = est_loss_t(rho, rho_t)
    l_cons = cons_loss_t(cae, rho, rho_t)
    l_task = task_loss_t(stack.head_logits_t(cae, rho_t), target, stack.task)
    per = l_est + weights.lambda2 * l_cons + weights.lambda3 * l_task
    total = per.mean()
    parts = {"est": float(l_est.data.mean()), "cons": float(l_cons.data.mean()),
             "task": float(l_task.data.mean())}
    return total, parts


# training ----------------------------------------------------------------------

@dataclass
class EstimatorConfig:
    epochs: int = 200
    n_batches: int = 10
    lr: float | None = None          # None -> per-task default
    lr_classification: float = 1e-4
    lr_regression: float = 1e-2
    lr_decay: float = 0.98
    lr_decay_every: int = 10
    lambda2: float = 1.0
    lambda3: float = 1.0
    latent: int = 64
    extractor_hidden: int = 128
    estimator_hidden: int = 256
    head_hidden: int = 64
    clip_norm: float | None = None
    seed: int = 0

    def base_lr(self, task: str) -> float:
        if self.lr is not None:
            return self.lr
        return self.lr_classification if task == "classification" else self.lr_regression


@dataclass
class EstimatorResult:
    stack: EstimatorStack
    log: TrainLog
    best_epoch: int
    best_score: float


def _validation_score(stack, cae, x, target, rho) -> tuple[float, float]:
    """(task score, -map error); compared lexicographically."""
    rho_t, out = stack.predict(cae, x)
    map_err = float(np.abs(rho_t - rho).mean())
    if stack.task == "classification":
        return float(np.mean(np.argmax(out, axis=1) == target)), -map_err
    return -float(np.mean((out - target) ** 2)), -map_err


def train_estimator(train_x: np.ndarray, train_rho: np.ndarray, train_target: np.ndarray,
                    cae: ConsistencyCae | None, task: str = "classification", n_classes: int = 2,
                    config: EstimatorConfig | None = None, val_x: np.ndarray | None = None,
                    val_target: np.ndarray | None = None, val_rho: np.ndarray | None = None, adpen: AdpenModel | None = None,
                    require_adpen: bool = True) -> EstimatorResult:
    """Optimise extractor, estimator and task head jointly.

    The parameters kept are those of the epoch with the best validation score
    (accuracy for classification, negative MSE for regression), ties going to
    the lower validation map error; without a validation set, the final epoch
    is kept.
    """
    config = config or EstimatorConfig()
    if require_adpen and adpen is None:
        raise UsageError("estimator training needs a trained ADPEN model")
    if cae is None or not cae.trained:
        raise UsageError("estimator training needs a pretrained CAE")
    train_x = np.asarray(train_x, dtype=float)
    train_rho = np.asarray(train_rho, dtype=float)
    if train_rho.shape[1] != cae.K:
        raise ValidationError("pseudo maps and CAE disagree on K")
    rng = np.random.default_rng([config.seed, 21])
    stack = EstimatorStack(train_x.shape[1], cae.K, cae.code, task, n_classes,
                           latent=config.latent, extractor_hidden=config.extractor_hidden,
                           estimator_hidden=config.estimator_hidden,
                           head_hidden=config.head_hidden, rng=rng)
    params = stack.parameters()
    opt = Adam(params, clip_norm=config.clip_norm)
    schedule = LrSchedule(config.base_lr(task), config.lr_decay, config.lr_decay_every)
    weights = LossWeights(config.lambda2, config.lambda3)
    N = len(train_x)
    n_batches = max(1, min(config.n_batches, N))
    train_log = TrainLog()
    best = ((-math.inf, -math.inf), -1, ad.snapshot(params))
    if val_x is not None and val_rho is None:
        raise ValidationError("validation pseudo maps are required with a validation set")
    for epoch in range(config.epochs):
        lr = lr_at(schedule, epoch)
        sums = {"total": 0.0, "est": 0.0, "cons": 0.0, "task": 0.0}
        for step, b in enumerate(np.array_split(rng.permutation(N), n_batches)):
            loss, parts = total_loss_t(stack, cae, train_x[b], train_rho[b], train_target[b], weights)
            if not math.isfinite(loss.item()):
                raise TrainingError(f"estimator loss non-finite at epoch {epoch}, step {step}")
            opt.zero_grad()
            ad.backprop(loss)
            opt.step(lr)
            sums["total"] += loss.item() * len(b) / N
            for k, v in parts.items():
                sums[k] += v * len(b) / N
        row = dict(epoch=epoch, lr=lr, **sums)
        if val_x is not None and len(val_x):
            score = _validation_score(stack, cae, val_x, val_target, val_rho)
            row["val_score"], row["val_map_mae"] = score[0], -score[1]
            if score > best[0]:
                best = (score, epoch, ad.snapshot(params))
        train_log.append(**row)
    if best[1] >= 0:
        ad.restore(params, best[2])
        return EstimatorResult(stack, train_log, best[1], best[0][0])
    return EstimatorResult(stack, train_log, config.epochs - 1, math.nan)


# persistence -------------------------------------------------------------------

def cae_to_dict(cae: ConsistencyCae) -> dict:
    return {"format": "protomap-cae", "version": 1, "K": cae.K, "hidden": cae.hidden,
            "code": cae.code, "trained": cae.trained, "params": ad.state_dict(cae.parameters())}


def cae_from_dict(d: dict) -> ConsistencyCae:
    if d.get("format") != "protomap-cae":
        raise ValidationError("not a CAE checkpoint")
    cae = ConsistencyCae(d["K"], d["hidden"], d["code"])
    ad.load_state(cae.parameters(), d["params"])
    cae.trained = bool(d["trained"])
    if cae.trained:
        ad.set_trainable(cae.parameters(), False)
    return cae


def estimator_to_dict(stack: EstimatorStack) -> dict:
    return {"format": "protomap-estimator", "version": 1, "input_dim": stack.input_dim,
            "K": stack.K, "code_dim": stack.head.layers[0].n_in, "task": stack.task,
            "n_classes": stack.n_classes, "sizes": stack.sizes,
            "params": ad.state_dict(stack.parameters())}


def estimator_from_dict(d: dict) -> EstimatorStack:
    if d.get("format") != "protomap-estimator":
        raise ValidationError("not an estimator checkpoint")
    stack = EstimatorStack(d["input_dim"], d["K"], d["code_dim"], d["task"], d["n_classes"],
                           **d["sizes"])
    ad.load_state(stack.parameters(), d["params"])
    return stack


def save_json(obj: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj))


def load_json(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
