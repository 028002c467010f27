"""Optimization: AdamW, cosine schedule, multi-dataset pretraining and few-shot alignment."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import ndcompute as nd
from .errors import ConfigError, ContractError, DimensionError, InvariantViolation, NumericError, UsageError
from .inference import OBJECTIVES, Encoders, objective
from .ndcompute import Tensor
from .ssm import GenerativeModel, init_emission_pca

log = logging.getLogger(__name__)

TRACE_FIELDS = ("step", "total", "recon", "kl_state", "kl_embed", "penalty", "lr")
ADAM_EPS = 1e-8


# optimizer --------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState,
              lr: float | None = None) -> None:
    """One in-place AdamW update with decoupled weight decay.

    Parameters missing from ``grads`` (or with a ``None`` gradient) still decay
    and advance their moments with a zero gradient.
    """
    lr = state.lr if lr is None else lr
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        p.data -= lr * (update + state.weight_decay * p.data)


def cosine_lr(step: int, total: int, base: float) -> float:
    if not 0 <= step <= max(total, 0):
        raise UsageError(f"step {step} outside [0, {total}]")
    if total == 0:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their joint L2 norm is at most ``max_norm``; returns the raw norm."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values() if g is not None))
    if max_norm and norm > max_norm:
        s = max_norm / norm
        for g in grads.values():
            if g is not None:
                g *= s
    return norm


# configuration ----------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 5e-3
    weight_decay: float = 1e-3
    steps: int = 1000
    batch_size: int = 8
    lam: float = 1e-3
    seed: int = 0
    objective: str = "dkf"
    particles: int = 4
    freeze: tuple[str, ...] = ()
    clip: float = 10.0
    window: int | None = None
    embed_kl: str = "batch"
    log_every: int = 100
    embed_warmup: int = 0         # leading steps with the embedding zeroed
    emission_init: str = "random"  # or "pca": see ssm.init_emission_pca

    def __post_init__(self):
        self.freeze = tuple(self.freeze)
        if self.batch_size < 1:
            raise ConfigError("must be at least 1", "batch_size")
        if not self.lr > 0:
            raise ConfigError("must be positive", "lr")
        if self.steps < 0:
            raise ConfigError("must be non-negative", "steps")
        if self.objective.lower() not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}", "objective")
        self.objective = self.objective.lower()
        if self.particles < 1:
            raise ConfigError("must be at least 1", "particles")
        if self.embed_warmup < 0:
            raise ConfigError("must be non-negative", "embed_warmup")
        if self.emission_init not in ("random", "pca"):
            raise ConfigError(f"unknown emission init {self.emission_init!r}", "emission_init")
        if self.window is not None and self.window < 2:
            raise ConfigError("must be at least 2", "window")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["freeze"] = list(self.freeze)
        return d

    @classmethod
    def from_dict(cls, d: dict, prefix: str = "train") -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        for k in d:
            if k not in known:
                raise ConfigError("unknown key", f"{prefix}.{k}")
        try:
            return cls(**d)
        except ConfigError as exc:
            raise ConfigError(str(exc).split(": ", 1)[-1], f"{prefix}.{exc.field}") from None
        except TypeError as exc:
            raise ConfigError(str(exc), prefix) from None


# helpers ----------------------------------------------------------------------

def all_parameters(model: GenerativeModel, encoders: Encoders | None) -> dict[str, Tensor]:
    out = dict(model.tensors())
    if encoders is not None:
        out.update(encoders.tensors())
    return out


def split_frozen(params: dict[str, Tensor], freeze: Iterable[str]) -> tuple[dict, dict]:
    freeze = tuple(freeze)
    frozen = {k: v for k, v in params.items() if k.startswith(freeze)} if freeze else {}
    return {k: v for k, v in params.items() if k not in frozen}, frozen


def fingerprint(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(params[k].data.tobytes())
    return h.hexdigest()


class BatchSampler:
    """Per-dataset reshuffled epochs; every step draws ``batch_size`` trials from every dataset."""

    def __init__(self, sizes: dict[str, int], batch_size: int, rng: np.random.Generator):
        for k, n in sizes.items():
            if n < 1:
                raise UsageError(f"dataset {k!r} has no training trials")
        self.sizes = dict(sizes)
        self.batch_size = batch_size
        self.rng = rng
        self._queues = {k: np.empty(0, dtype=int) for k in sizes}

    def _take(self, k: str) -> np.ndarray:
        out = []
        need = self.batch_size
        while need:
            q = self._queues[k]
            if q.size == 0:
                q = self.rng.permutation(self.sizes[k])
            out.append(q[:need])
            need -= min(need, q.size)
            self._queues[k] = q[len(out[-1]):]
        return np.concatenate(out)

    def __call__(self) -> dict[str, np.ndarray]:
        return {k: self._take(k) for k in self.sizes}


def _crop(y: np.ndarray, window: int | None, rng: np.random.Generator) -> np.ndarray:
    if window is None or window >= y.shape[1]:
        return y
    starts = rng.integers(0, y.shape[1] - window + 1, size=y.shape[0])
    return np.stack([y[i, s:s + window] for i, s in enumerate(starts)])


@dataclass
class TrainResult:
    trace: list[dict]
    steps: int
    frozen_hash: str | None = None

    def final(self) -> dict:
        return self.trace[-1] if self.trace else {}


def write_trace(path, trace: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in trace:
            w.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in TRACE_FIELDS})


def read_trace(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


# training loops ---------------------------------------------------------------

def _optimize(model, encoders, data: dict[str, np.ndarray], config: TrainConfig, trainable: dict,
              callback: Callable[[int, dict], None] | None) -> list[dict]:
    rng = np.random.default_rng(config.seed)
    sampler = BatchSampler({k: len(v) for k, v in data.items()}, config.batch_size, rng)
    state = OptimizerState(config.lr, config.weight_decay)
    trace = []
    for step in range(config.steps):
        idx = sampler()
        batches = {k: _crop(data[k][i], config.window, rng) for k, i in idx.items()}
        for p in trainable.values():
            p.grad = None
        lr = cosine_lr(step, config.steps, config.lr)
        try:
            with nd.Tape() as tape:
                report = objective(config.objective, model, encoders, batches, rng, lam=config.lam,
                                   particles=config.particles, embed_kl=config.embed_kl,
                                   e_scale=0.0 if step < config.embed_warmup else 1.0)
                loss = -report.total / report.trials
            tape.backward(loss)
            grads = {k: p.grad for k, p in trainable.items()}
            clip_global_norm(grads, config.clip)
            adam_step(trainable, grads, state, lr)
        except NumericError as exc:
            dump = {k: i.tolist() for k, i in idx.items()}
            err = NumericError(f"step {step}: {exc}; offending batch trial ids {dump}")
            err.batch_ids = dump
            raise err from exc
        row = {"step": step, **report.as_floats(), "lr": lr}
        trace.append(row)
        if callback is not None:
            callback(step, row)
        if config.log_every and step % config.log_every == 0:
            log.info("step %d total %.3f recon %.3f lr %.2e", step, row["total"], row["recon"], lr)
    return trace


def train_multisession(model: GenerativeModel, encoders: Encoders, datasets: dict[str, np.ndarray],
                       config: TrainConfig, trace_path=None,
                       callback: Callable[[int, dict], None] | None = None) -> TrainResult:
    """Jointly fit shared and per-dataset parameters on ``datasets`` (id -> training trials)."""
    if not datasets:
        raise UsageError("need at least one dataset")
    data = {}
    for k, y in datasets.items():
        model.get(k)
        y = np.asarray(y, dtype=float)
        if y.ndim != 3 or y.shape[-1] != model.d_y[k]:
            raise DimensionError(f"dataset {k!r}: expected (trials, T, {model.d_y[k]}), got {y.shape}")
        data[k] = y
        if config.emission_init == "pca":
            init_emission_pca(model, k, y)
    params = all_parameters(model, encoders)
    trainable, frozen = split_frozen(params, config.freeze)
    before = fingerprint(frozen)
    trace = _optimize(model, encoders, data, config, trainable, callback)
    if fingerprint(frozen) != before:
        raise InvariantViolation("frozen parameters changed during training")
    if trace_path is not None:
        write_trace(trace_path, trace)
    return TrainResult(trace, config.steps, before)


@dataclass
class AlignmentJob:
    """Fit a new dataset's read-in, likelihood and state noise against a frozen model."""

    model: GenerativeModel
    encoders: Encoders
    dataset_id: str
    observations: np.ndarray      # (n_s, T, d_y)

    @property
    def n_s(self) -> int:
        return len(self.observations)


def align_few_shot(job: AlignmentJob, config: TrainConfig, trace_path=None) -> TrainResult:
    y = np.asarray(job.observations, dtype=float)
    if y.ndim != 3:
        raise DimensionError(f"observations must be (n_s, T, d_y), got {y.shape}")
    if job.n_s < 1:
        raise UsageError("few-shot alignment needs at least one trial")
    model = job.model
    if job.dataset_id in model.datasets:
        raise ContractError(f"dataset {job.dataset_id!r} is already in the registry")
    model.register(job.dataset_id, y.shape[-1], np.random.default_rng([config.seed, 1]))
    if config.emission_init == "pca":
        init_emission_pca(model, job.dataset_id, y)
    prefix = f"datasets/{job.dataset_id}/"
    params = all_parameters(model, job.encoders)
    trainable = {k: v for k, v in params.items() if k.startswith(prefix)}
    frozen = {k: v for k, v in params.items() if k not in trainable}
    before = fingerprint(frozen)
    cfg = dataclasses.replace(config, batch_size=min(config.batch_size, job.n_s))
    trace = _optimize(model, job.encoders, {job.dataset_id: y}, cfg, trainable, None)
    if fingerprint(frozen) != before:
        raise InvariantViolation("shared parameters changed during few-shot alignment")
    if trace_path is not None:
        write_trace(trace_path, trace)
    return TrainResult(trace, cfg.steps, before)
