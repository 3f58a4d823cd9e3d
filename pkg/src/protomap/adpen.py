"""Prototype embedding network: VAE over clinical vectors, ordering head, SOM grid.

The three parts are trained jointly on

    loss = VAE(negated ELBO) + ordering + lambda1 * SOM

and the prototype grid can afterwards be fine-tuned with the VAE frozen.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, MLP, DenseLayer, Adam, TrainingError
from .cohort import Cohort, ValidationError, sample_ordering_pairs

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "protomap-adpen"
CHECKPOINT_VERSION = 1


# topology ----------------------------------------------------------------------

TOPOLOGY_KINDS = {"chain": 1, "grid2d": 2, "grid3d": 3}


@dataclass(frozen=True)
class Topology:
    """Prototype arrangement.  Units are numbered row-major over ``dims``."""

    kind: str
    dims: tuple[int, ...]

    def __post_init__(self):
        if self.kind not in TOPOLOGY_KINDS:
            raise ValidationError(f"unknown topology {self.kind!r}")
        if len(self.dims) != TOPOLOGY_KINDS[self.kind]:
            raise ValidationError(f"{self.kind} needs {TOPOLOGY_KINDS[self.kind]} dims, got {self.dims}")
        if any(d < 1 for d in self.dims):
            raise ValidationError("topology dims must be positive")

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    def coords(self) -> np.ndarray:
        return np.array(list(np.ndindex(*self.dims)), dtype=int).reshape(self.size, len(self.dims))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "dims": list(self.dims)}

    @classmethod
    def from_dict(cls, d: dict) -> "Topology":
        return cls(d["kind"], tuple(int(x) for x in d["dims"]))


class PrototypeGrid:
    def __init__(self, topology: Topology, prototypes: np.ndarray):
        prototypes = np.asarray(prototypes, dtype=float)
        if prototypes.ndim != 2 or prototypes.shape[0] != topology.size:
            raise ValidationError(
                f"need {topology.size} prototypes for {topology.dims}, got {prototypes.shape}")
        self.topology = topology
        self.P = Tensor(prototypes, requires_grad=True, name="som.prototypes")
        self._coords = topology.coords()

    @property
    def K(self) -> int:
        return self.topology.size

    @property
    def dim(self) -> int:
        return self.P.shape[1]

    @property
    def coords(self) -> np.ndarray:
        return self._coords

    @property
    def prototypes(self) -> np.ndarray:
        return self.P.data

    def copy(self) -> "PrototypeGrid":
        return PrototypeGrid(self.topology, self.P.data.copy())


# SOM primitives ----------------------------------------------------------------

@dataclass
class SomSchedule:
    gamma_max: float
    gamma_min: float
    T: int
    t: int = 0

    def __post_init__(self):
        if not 0 < self.gamma_min <= self.gamma_max:
            raise ValidationError("need 0 < gamma_min <= gamma_max")
        if self.T < 1:
            raise ValidationError("T must be >= 1")


def radius(schedule: SomSchedule) -> float:
    s = min(max(schedule.t, 0), schedule.T) / schedule.T
    # geometric interpolation written so both endpoints are exact
    return schedule.gamma_max ** (1.0 - s) * schedule.gamma_min ** s


def squared_distances(h: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    h = np.atleast_2d(h)
    return ((h[:, None, :] - prototypes[None, :, :]) ** 2).sum(axis=2)


def bmu_index(h: np.ndarray, grid: PrototypeGrid | np.ndarray) -> int | np.ndarray:
    """Index of the nearest prototype; ties go to the lowest index."""
    P = grid.prototypes if isinstance(grid, PrototypeGrid) else np.asarray(grid)
    h = np.asarray(h, dtype=float)
    d = squared_distances(h, P)
    idx = np.argmin(d, axis=1)
    return int(idx[0]) if h.ndim == 1 else idx


def topo_distances(beta: int | np.ndarray, grid: PrototypeGrid | Topology) -> np.ndarray:
    coords = grid.coords if isinstance(grid, PrototypeGrid) else grid.coords()
    beta = np.asarray(beta)
    return np.abs(coords[beta][..., None, :] - coords).sum(axis=-1).astype(float)


def neighborhood_weights(delta: np.ndarray, gamma: float) -> np.ndarray:
    if gamma <= 0:
        raise ValidationError(f"radius must be positive, got {gamma}")
    delta = np.asarray(delta, dtype=float)
    return np.exp(-delta ** 2 / (2.0 * gamma ** 2))


def som_loss(h: Tensor, grid: PrototypeGrid, gamma: float) -> Tensor:
    """Neighbourhood-weighted squared distance, summed over batch and units.

    BMUs are picked on the current values and treated as constants.
    """
    h = ad.as_tensor(h)
    B, M = h.shape
    diff = h.reshape(B, 1, M) - grid.P.reshape(1, grid.K, M)
    D = ad.square(diff).sum(axis=2)
    beta = np.argmin(D.data, axis=1)
    omega = neighborhood_weights(topo_distances(beta, grid), gamma)
    return (D * omega).sum()


def quantization_error(latents: np.ndarray, grid: PrototypeGrid) -> float:
    d = squared_distances(latents, grid.prototypes)
    return float(d.min(axis=1).mean())


def topographic_error(latents: np.ndarray, grid: PrototypeGrid) -> float:
    """Fraction of samples whose two nearest units are not grid neighbours."""
    d = squared_distances(latents, grid.prototypes)
    order = np.argsort(d, axis=1, kind="stable")[:, :2]
    gap = np.abs(grid.coords[order[:, 0]] - grid.coords[order[:, 1]]).sum(axis=1)
    return float(np.mean(gap != 1))


# VAE + ordering head -----------------------------------------------------------

@dataclass
class LatentPoint:
    h: np.ndarray
    mu: np.ndarray
    log_var: np.ndarray


class VaeModel:
    def __init__(self, n_stages: int, hidden: Sequence[int] = (10, 16, 8), latent_dim: int = 3,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_stages = n_stages
        self.hidden = tuple(hidden)
        self.latent_dim = latent_dim
        d_in = n_stages + 2
        self.encoder = MLP([d_in, *hidden], hidden="relu", out_activation="relu", rng=rng,
                           name="vae.enc")
        self.mu_head = DenseLayer(hidden[-1], latent_dim, rng=rng, name="vae.mu")
        self.logvar_head = DenseLayer(hidden[-1], latent_dim, rng=rng, name="vae.logvar")
        self.decoder = MLP([latent_dim, *reversed(hidden), d_in], hidden="relu",
                           out_activation="identity", rng=rng, name="vae.dec")

    def parameters(self) -> list[Tensor]:
        return (self.encoder.parameters() + self.mu_head.parameters()
                + self.logvar_head.parameters() + self.decoder.parameters())

    def encode_t(self, c) -> tuple[Tensor, Tensor]:
        z = self.encoder(c)
        return self.mu_head(z), self.logvar_head(z)

    def decode_logits(self, h) -> Tensor:
        return self.decoder(h)

    def decode(self, h: np.ndarray) -> np.ndarray:
        """Decoded clinical vectors: stage probabilities, then score and age in [0, 1]."""
        out = self.decode_logits(np.atleast_2d(h)).data
        L = self.n_stages
        z = out[:, :L] - out[:, :L].max(axis=1, keepdims=True)
        e = np.exp(z)
        probs = e / e.sum(axis=1, keepdims=True)
        cont = 1.0 / (1.0 + np.exp(-out[:, L:]))
        return np.concatenate([probs, cont], axis=1)


def encode(vae: VaeModel, c: np.ndarray, rng: np.random.Generator | None = None,
           sample: bool = False) -> LatentPoint:
    """Posterior mean/log-variance and a latent draw (``h = mu`` unless ``sample``)."""
    mu, logvar = vae.encode_t(np.atleast_2d(c))
    mu, logvar = mu.data, logvar.data
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(logvar))):
        raise TrainingError("encoder produced non-finite output")
    if sample:
        rng = rng if rng is not None else np.random.default_rng()
        h = mu + np.exp(0.5 * logvar) * rng.standard_normal(mu.shape)
    else:
        h = mu.copy()
    if np.ndim(c) == 1:
        return LatentPoint(h[0], mu[0], logvar[0])
    return LatentPoint(h, mu, logvar)


def kl_divergence(mu, log_var) -> float:
    """KL(N(mu, diag(exp(log_var))) || N(0, I)), summed over all entries."""
    mu = np.asarray(mu, dtype=float)
    log_var = np.asarray(log_var, dtype=float)
    if mu.shape != log_var.shape:
        raise ValidationError("mu and log_var must have equal shapes")
    return float(0.5 * np.sum(mu ** 2 + np.exp(log_var) - 1.0 - log_var))


def _kl_t(mu: Tensor, logvar: Tensor) -> Tensor:
    return 0.5 * (ad.square(mu) + ad.exp(logvar) - 1.0 - logvar).sum()


def reconstruction_loss_t(logits: Tensor, c: np.ndarray, n_stages: int) -> Tensor:
    """Stage cross-entropy plus squared error on score/age, summed over the batch."""
    L = n_stages
    stage_logits = logits[:, :L]
    ce = -(ad.log_softmax(stage_logits, axis=1) * c[:, :L]).sum()
    cont = ad.sigmoid(logits[:, L:])
    se = ad.square(cont - c[:, L:]).sum()
    return ce + se


def vae_loss_t(vae: VaeModel, c: np.ndarray, eps: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Negated ELBO summed over the batch, plus the latent draw used for it."""
    c = np.atleast_2d(c)
    mu, logvar = vae.encode_t(c)
    h = mu if eps is None else mu + ad.exp(0.5 * logvar) * eps
    loss = reconstruction_loss_t(vae.decode_logits(h), c, vae.n_stages) + _kl_t(mu, logvar)
    return loss, h


def vae_loss(vae: VaeModel, batch: np.ndarray, eps: np.ndarray | None = None) -> float:
    if len(batch) == 0:
        raise ValidationError("empty batch")
    return vae_loss_t(vae, batch, eps)[0].item()


class OrderingHead:
    def __init__(self, latent_dim: int, rng: np.random.Generator | None = None):
        self.layer = DenseLayer(latent_dim, 1, rng=rng, name="order")

    def parameters(self) -> list[Tensor]:
        return self.layer.parameters()

    def __call__(self, h) -> Tensor:
        return self.layer(h)

    def project(self, h: np.ndarray) -> np.ndarray:
        return self.layer(np.atleast_2d(h)).data[:, 0]


def ordering_loss_t(head: OrderingHead, h: Tensor, pairs: np.ndarray, bounded: bool = True,
                    stop_grad_denominator: bool = False) -> Tensor | None:
    """Ordering term over (anchor, next-stage partner) rows of ``h``.

    Each pair contributes ``(O(a) - O(b)) / ||a - b||``, passed through a
    sigmoid when ``bounded``.  Pairs closer than 1e-12 are dropped.  Returns
    None when no usable pair remains.
    """
    h = ad.as_tensor(h)
    if len(pairs) == 0:
        return None
    a_idx, b_idx = pairs[:, 0], pairs[:, 1]
    gap = np.sqrt(((h.data[a_idx] - h.data[b_idx]) ** 2).sum(axis=1))
    keep = gap > 1e-12
    if not np.all(keep):
        log.debug("ordering loss: skipped %d coincident pairs", int((~keep).sum()))
        a_idx, b_idx = a_idx[keep], b_idx[keep]
        if len(a_idx) == 0:
            return None
    ha, hb = h[a_idx], h[b_idx]
    proj_diff = (head(ha) - head(hb))[:, 0]
    if stop_grad_denominator:
        norm = Tensor(np.sqrt(((ha.data - hb.data) ** 2).sum(axis=1)))
    else:
        norm = ad.sqrt(ad.square(ha - hb).sum(axis=1))
    ratio = proj_diff / norm
    return (ad.sigmoid(ratio) if bounded else ratio).sum()


def ordering_loss(head: OrderingHead, anchors: np.ndarray, partners: np.ndarray,
                  bounded: bool = True) -> float:
    anchors = np.atleast_2d(anchors)
    partners = np.atleast_2d(partners)
    h = np.concatenate([anchors, partners])
    n = len(anchors)
    pairs = np.stack([np.arange(n), np.arange(n, 2 * n)], axis=1)
    out = ordering_loss_t(head, Tensor(h), pairs, bounded=bounded)
    return 0.0 if out is None else out.item()


# model + training --------------------------------------------------------------

@dataclass
class AdpenConfig:
    hidden: tuple[int, ...] = (10, 16, 8)
    latent_dim: int = 3
    topology: str = "grid2d"
    dims: tuple[int, ...] = (5, 20)
    epochs: int = 1000
    n_batches: int = 4
    lr: float = 1e-3
    lambda1: float = 0.01
    gamma_max: float | None = None
    gamma_min: float = 0.5
    bounded_order: bool = True
    order_stop_grad: bool = False
    clip_norm: float | None = None
    finetune_epochs: int = 500
    finetune_lr: float = 1e-3
    finetune_gamma_max: float | None = 2.0
    seed: int = 0

    def resolved_gamma_max(self) -> float:
        return self.gamma_max if self.gamma_max is not None else max(self.dims) / 2.0

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "AdpenConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


class AdpenModel:
    def __init__(self, vae: VaeModel, head: OrderingHead, grid: PrototypeGrid,
                 config: AdpenConfig, schedule: SomSchedule | None = None):
        self.vae = vae
        self.head = head
        self.grid = grid
        self.config = config
        self.schedule = schedule

    @classmethod
    def build(cls, config: AdpenConfig, n_stages: int, rng: np.random.Generator) -> "AdpenModel":
        topo = Topology(config.topology, tuple(config.dims))
        vae = VaeModel(n_stages, config.hidden, config.latent_dim, rng=rng)
        head = OrderingHead(config.latent_dim, rng=rng)
        grid = PrototypeGrid(topo, np.zeros((topo.size, config.latent_dim)))
        return cls(vae, head, grid, config)

    def network_parameters(self) -> list[Tensor]:
        return self.vae.parameters() + self.head.parameters()

    def parameters(self) -> list[Tensor]:
        return self.network_parameters() + [self.grid.P]

    def latents(self, clinical: np.ndarray) -> np.ndarray:
        """Inference-mode latents (posterior means)."""
        return encode(self.vae, np.atleast_2d(clinical)).mu

    def projection(self, clinical: np.ndarray) -> np.ndarray:
        return self.head.project(self.latents(clinical))

    def vae_checksum(self) -> str:
        return _checksum(self.vae.parameters())


def _checksum(params: Sequence[Tensor]) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def init_prototypes(model: AdpenModel, clinical: np.ndarray, batch_size: int,
                    rng: np.random.Generator) -> None:
    """Copy K inference latents drawn from one random mini-batch into the grid."""
    K = model.grid.K
    N = len(clinical)
    batch = rng.permutation(N)[:max(batch_size, 1)]
    if len(batch) >= K:
        chosen = batch[:K]
    else:
        chosen = np.concatenate([batch, rng.choice(N, size=K - len(batch), replace=True)])
    model.grid.P.data = model.latents(clinical[chosen]).copy()


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def append(self, **row) -> None:
        self.rows.append(row)

    def column(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.rows])

    def to_csv(self, path: str | Path) -> None:
        if not self.rows:
            Path(path).write_text("")
            return
        keys = list(self.rows[0].keys())
        lines = [",".join(keys)]
        lines += [",".join(repr(r[k]) if isinstance(r[k], float) else str(r[k]) for k in keys)
                  for r in self.rows]
        Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class AdpenResult:
    model: AdpenModel
    log: TrainLog
    initial_qe: float
    initial_te: float
    initial_latent_var: float

    @property
    def initial_qe_normalized(self) -> float:
        """Initial QE divided by the total variance of the initial latents."""
        return self.initial_qe / self.initial_latent_var


def _check_finite(value: float, what: str, epoch: int, step: int) -> None:
    if not math.isfinite(value):
        raise TrainingError(f"{what} became non-finite at epoch {epoch}, step {step}")


def train_adpen(cohort: Cohort, config: AdpenConfig | None = None) -> AdpenResult:
    """Jointly fit VAE, ordering head and prototype grid on the cohort."""
    config = config or AdpenConfig()
    cohort.require_stages(np.unique(cohort.stages))
    rng = np.random.default_rng(config.seed)
    model = AdpenModel.build(config, cohort.n_stages, rng)
    X = cohort.clinical
    stages = cohort.stages
    N = len(X)
    n_batches = max(1, min(config.n_batches, N))
    init_prototypes(model, X, int(math.ceil(N / n_batches)), rng)
    mu0 = model.latents(X)
    initial_qe = quantization_error(mu0, model.grid)
    initial_te = topographic_error(mu0, model.grid)
    initial_var = float(mu0.var(axis=0).sum())

    T = max(1, n_batches * config.epochs)
    schedule = SomSchedule(config.resolved_gamma_max(), config.gamma_min, T)
    model.schedule = schedule
    params = model.parameters()
    opt = Adam(params, clip_norm=config.clip_norm)
    train_log = TrainLog()
    for epoch in range(config.epochs):
        perm = rng.permutation(N)
        sums = {"vae": 0.0, "order": 0.0, "som": 0.0, "total": 0.0}
        for step, b in enumerate(np.array_split(perm, n_batches)):
            c = X[b]
            eps = rng.standard_normal((len(b), config.latent_dim))
            l_vae, h = vae_loss_t(model.vae, c, eps)
            pairs = sample_ordering_pairs(stages[b], rng, cohort.n_stages)
            l_order = ordering_loss_t(model.head, h, pairs, bounded=config.bounded_order,
                                      stop_grad_denominator=config.order_stop_grad)
            gamma = radius(schedule)
            l_som = som_loss(h, model.grid, gamma)
            total = l_vae + config.lambda1 * l_som
            if l_order is not None:
                total = total + l_order
            _check_finite(total.item(), "ADPEN loss", epoch, step)
            opt.zero_grad()
            ad.backprop(total)
            opt.step(config.lr)
            schedule.t += 1
            sums["vae"] += l_vae.item()
            sums["order"] += 0.0 if l_order is None else l_order.item()
            sums["som"] += l_som.item()
            sums["total"] += total.item()
        mu = model.latents(X)
        train_log.append(epoch=epoch, gamma=radius(schedule), **sums,
                         qe=quantization_error(mu, model.grid))
    return AdpenResult(model, train_log, initial_qe, initial_te, initial_var)


def finetune_som(model: AdpenModel, cohort: Cohort, epochs: int | None = None,
                 lr: float | None = None, seed: int | None = None) -> TrainLog:
    """Update only the prototypes against frozen inference latents."""
    cfg = model.config
    epochs = cfg.finetune_epochs if epochs is None else epochs
    lr = cfg.finetune_lr if lr is None else lr
    rng = np.random.default_rng([cfg.seed if seed is None else seed, 7])
    train_log = TrainLog()
    if epochs <= 0:
        return train_log
    H = model.latents(cohort.clinical)
    N = len(H)
    n_batches = max(1, min(cfg.n_batches, N))
    gmax = cfg.finetune_gamma_max if cfg.finetune_gamma_max is not None else cfg.gamma_min
    schedule = SomSchedule(max(gmax, cfg.gamma_min), cfg.gamma_min, n_batches * epochs)
    opt = Adam([model.grid.P])
    for epoch in range(epochs):
        perm = rng.permutation(N)
        total = 0.0
        for step, b in enumerate(np.array_split(perm, n_batches)):
            loss = som_loss(Tensor(H[b]), model.grid, radius(schedule))
            _check_finite(loss.item(), "SOM fine-tune loss", epoch, step)
            opt.zero_grad()
            ad.backprop(loss)
            opt.step(lr)
            schedule.t += 1
            total += loss.item()
        train_log.append(epoch=epoch, som=total, qe=quantization_error(H, model.grid),
                         te=topographic_error(H, model.grid))
    return train_log


# checkpoint --------------------------------------------------------------------

def adpen_to_dict(model: AdpenModel, n_stages: int) -> dict:
    sched = None if model.schedule is None else asdict(model.schedule)
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "n_stages": n_stages,
        "config": model.config.to_dict(),
        "seed": model.config.seed,
        "topology": model.grid.topology.to_dict(),
        "schedule": sched,
        "params": ad.state_dict(model.network_parameters()),
        "prototypes": model.grid.prototypes.tolist(),
    }


def adpen_from_dict(d: dict) -> AdpenModel:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError("not an ADPEN checkpoint")
    if d.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {d.get('version')}")
    config = AdpenConfig.from_dict(d["config"])
    model = AdpenModel.build(config, int(d["n_stages"]), np.random.default_rng(0))
    ad.load_state(model.network_parameters(), d["params"])
    model.grid = PrototypeGrid(Topology.from_dict(d["topology"]), np.asarray(d["prototypes"]))
    if d.get("schedule"):
        model.schedule = SomSchedule(**d["schedule"])
    return model


def save_adpen(model: AdpenModel, path: str | Path, n_stages: int | None = None) -> None:
    n_stages = model.vae.n_stages if n_stages is None else n_stages
    Path(path).write_text(json.dumps(adpen_to_dict(model, n_stages)))


def load_adpen(path: str | Path) -> AdpenModel:
    return adpen_from_dict(json.loads(Path(path).read_text()))
