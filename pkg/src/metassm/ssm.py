"""Hierarchical state-space model.

    e      ~ N(0, I)
    z_1    ~ N(mu0, I)
    z_t    ~ N(f(z_{t-1}; e), diag Q^i)
    y_t    ~ N(C^i z_t + D^i, diag R^i)

plus a per-dataset read-in MLP mapping raw ``y`` into a shared space used by
the encoders.  Shared parameters live on :class:`GenerativeModel`; every
registered dataset owns one :class:`DatasetParams`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ndcompute as nd
from .dynamics import ADAPTABLE, DynamicsVariant, LowRankDelta, dynamics_mean, hypernet_delta
from .errors import ContractError, DimensionError, UnknownDatasetError
from .ndcompute import GaussianDiag, Tensor, VARIANCE_FLOOR, as_tensor


def softplus_inv(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return v + np.log(-np.expm1(-v))


def _positive(raw: Tensor) -> Tensor:
    return nd.softplus(raw) + VARIANCE_FLOOR


@dataclass
class LikelihoodParams:
    C: Tensor       # (d_y, d_z)
    D: Tensor       # (d_y,)
    R_raw: Tensor   # (d_y,), R = softplus(R_raw) + floor

    def __post_init__(self):
        d_y = self.C.shape[0]
        if self.D.shape != (d_y,) or self.R_raw.shape != (d_y,):
            raise DimensionError("likelihood parameter shapes disagree")

    @property
    def d_y(self) -> int:
        return self.C.shape[0]

    @property
    def R_diag(self) -> Tensor:
        return _positive(self.R_raw)

    def tensors(self):
        return {"C": self.C, "D": self.D, "R_raw": self.R_raw}


@dataclass
class ReadInParams:
    """Per-time-step MLP; tanh between layers, linear output.  No layers means identity."""

    layers: list[tuple[Tensor, Tensor]]  # W (in, out), b (out,)

    @property
    def d_in(self) -> int | None:
        return self.layers[0][0].shape[0] if self.layers else None

    @property
    def d_out(self) -> int | None:
        return self.layers[-1][0].shape[1] if self.layers else None

    def tensors(self):
        out = {}
        for i, (W, b) in enumerate(self.layers):
            out[f"{i}.W"] = W
            out[f"{i}.b"] = b
        return out

    def __call__(self, y: Tensor) -> Tensor:
        h = y
        for i, (W, b) in enumerate(self.layers):
            h = h @ W + b
            if i < len(self.layers) - 1:
                h = nd.tanh(h)
        return h

    @classmethod
    def init(cls, widths, rng):
        layers = []
        for a, b in zip(widths[:-1], widths[1:]):
            bound = 1.0 / np.sqrt(a)
            layers.append((Tensor(rng.uniform(-bound, bound, size=(a, b)), requires_grad=True),
                           Tensor(rng.uniform(-bound, bound, size=b), requires_grad=True)))
        return cls(layers)

    @classmethod
    def identity(cls, d: int):
        return cls([(Tensor(np.eye(d), requires_grad=True), Tensor(np.zeros(d), requires_grad=True))])


@dataclass
class StateNoise:
    Q_raw: Tensor  # (d_z,)

    @property
    def Q_diag(self) -> Tensor:
        return _positive(self.Q_raw)

    def tensors(self):
        return {"Q_raw": self.Q_raw}


@dataclass
class DatasetParams:
    likelihood: LikelihoodParams
    read_in: ReadInParams
    noise: StateNoise

    def tensors(self) -> dict[str, Tensor]:
        out = {f"lik.{k}": v for k, v in self.likelihood.tensors().items()}
        out.update({f"readin.{k}": v for k, v in self.read_in.tensors().items()})
        out.update({f"noise.{k}": v for k, v in self.noise.tensors().items()})
        return out


@dataclass
class ModelConfig:
    d_z: int = 2
    d_e: int = 1
    d_ybar: int = 8
    variant: str = "lowrank"
    hidden: tuple[int, int] = (32, 32)
    rank: int = 1
    adapted: tuple[str, ...] = ADAPTABLE
    hyper_hidden: tuple[int, ...] = (16, 16)
    nonlinearity: str = "tanh"
    residual: bool = False
    adapter_targets: tuple[str, ...] = ("W_in", "W_hh", "W_o", "b_in", "b_hh", "b_o")
    read_in_hidden: tuple[int, ...] = (64,)
    r_init: float = 0.1
    q_init: float = 0.01

    def __post_init__(self):
        for name in ("hidden", "adapted", "hyper_hidden", "adapter_targets", "read_in_hidden"):
            setattr(self, name, tuple(getattr(self, name)))
        if min(self.d_z, self.d_e, self.d_ybar) < 1:
            raise ContractError("d_z, d_e and d_ybar must be positive")

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class GenerativeModel:
    config: ModelConfig
    dynamics: DynamicsVariant
    mu0: Tensor
    datasets: dict[str, DatasetParams] = field(default_factory=dict)
    d_y: dict[str, int] = field(default_factory=dict)

    @classmethod
    def create(cls, config: ModelConfig, rng: np.random.Generator) -> "GenerativeModel":
        c = config
        dyn = DynamicsVariant.build(c.variant, c.d_z, c.d_e, rng, hidden=c.hidden, rank=c.rank,
                                    adapted=c.adapted, hyper_hidden=c.hyper_hidden,
                                    nonlinearity=c.nonlinearity, residual=c.residual,
                                    adapter_targets=c.adapter_targets)
        return cls(c, dyn, Tensor(np.zeros(c.d_z), requires_grad=True))

    @property
    def d_z(self) -> int:
        return self.config.d_z

    @property
    def d_e(self) -> int:
        return self.config.d_e

    def register(self, dataset_id: str, d_y: int, rng: np.random.Generator) -> DatasetParams:
        if dataset_id in self.datasets:
            raise ContractError(f"dataset {dataset_id!r} already registered")
        if "/" in dataset_id or not dataset_id:
            raise ContractError(f"invalid dataset id {dataset_id!r}")
        c = self.config
        bound = 1.0 / np.sqrt(c.d_z)
        lik = LikelihoodParams(
            Tensor(rng.uniform(-bound, bound, size=(d_y, c.d_z)), requires_grad=True),
            Tensor(np.zeros(d_y), requires_grad=True),
            Tensor(np.full(d_y, softplus_inv(c.r_init)), requires_grad=True))
        read_in = ReadInParams.init((d_y, *c.read_in_hidden, c.d_ybar), rng)
        noise = StateNoise(Tensor(np.full(c.d_z, softplus_inv(c.q_init)), requires_grad=True))
        params = DatasetParams(lik, read_in, noise)
        self.datasets[dataset_id] = params
        self.d_y[dataset_id] = d_y
        return params

    def get(self, dataset_id: str) -> DatasetParams:
        try:
            return self.datasets[dataset_id]
        except KeyError:
            raise UnknownDatasetError(dataset_id) from None

    def shared_tensors(self) -> dict[str, Tensor]:
        out = {f"dynamics/{k}": v for k, v in self.dynamics.tensors().items()}
        out["prior/mu0"] = self.mu0
        return out

    def dataset_tensors(self, dataset_id: str) -> dict[str, Tensor]:
        return {f"datasets/{dataset_id}/{k}": v for k, v in self.get(dataset_id).tensors().items()}

    def tensors(self) -> dict[str, Tensor]:
        out = self.shared_tensors()
        for ds in self.datasets:
            out.update(self.dataset_tensors(ds))
        return out

    def describe(self) -> dict:
        return {"config": self.config.to_dict(),
                "datasets": [{"id": k, "d_y": v} for k, v in self.d_y.items()]}

    @classmethod
    def from_description(cls, desc: dict, arrays: dict[str, np.ndarray]) -> "GenerativeModel":
        rng = np.random.default_rng(0)
        model = cls.create(ModelConfig.from_dict(desc["config"]), rng)
        for entry in desc["datasets"]:
            model.register(entry["id"], int(entry["d_y"]), rng)
        assign_arrays(model.tensors(), arrays)
        return model


def assign_arrays(tensors: dict[str, Tensor], arrays: dict[str, np.ndarray]) -> None:
    """Copy stored arrays into the matching tensors; names and shapes must agree."""
    missing = set(tensors) - set(arrays)
    if missing:
        raise ContractError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    for name, t in tensors.items():
        a = arrays[name]
        if a.shape != t.shape:
            raise DimensionError(f"{name}: stored shape {a.shape} != expected {t.shape}")
        t.data[...] = a


def embedding_prior(d_e: int) -> GaussianDiag:
    if d_e < 1:
        raise ContractError("d_e must be at least 1")
    return GaussianDiag.standard(d_e)


def initial_prior(model: GenerativeModel, shape: tuple = ()) -> GaussianDiag:
    mean = nd.broadcast_to(model.mu0, shape + (model.d_z,))
    return GaussianDiag(mean, np.ones(shape + (model.d_z,)))


def transition(model: GenerativeModel, dataset_id: str, z_prev, e=None,
               delta: LowRankDelta | None = None) -> GaussianDiag:
    """p(z_t | z_{t-1}, e) for any batch of previous states."""
    ds = model.get(dataset_id)
    mean = dynamics_mean(model.dynamics, z_prev, e, delta)
    return GaussianDiag(mean, nd.broadcast_to(ds.noise.Q_diag, mean.shape))


def init_emission_pca(model: GenerativeModel, dataset_id: str, y) -> None:
    """Set C and D from the leading principal components of ``y`` (trials, T, d_y).

    For a planar latent the second axis is signed so the projected
    trajectories turn counter-clockwise on average, which pins one chirality
    across datasets.  Each column is scaled by its component's std.
    """
    lik = model.get(dataset_id).likelihood
    y = np.asarray(y, dtype=float)
    if y.ndim != 3 or y.shape[-1] != lik.d_y:
        raise DimensionError(f"expected (trials, T, {lik.d_y}), got {y.shape}")
    mean = y.reshape(-1, lik.d_y).mean(axis=0)
    yc = y - mean
    _, s, vt = np.linalg.svd(yc.reshape(-1, lik.d_y), full_matrices=False)
    k = min(model.d_z, len(s))
    v = vt[:k].T.copy()
    for j in range(k):
        if v[np.argmax(np.abs(v[:, j])), j] < 0:
            v[:, j] = -v[:, j]
    if k == 2 and model.d_z == 2:
        x = yc @ v
        turn = np.sum(x[:, :-1, 0] * x[:, 1:, 1] - x[:, :-1, 1] * x[:, 1:, 0])
        if turn < 0:
            v[:, 1] = -v[:, 1]
    scale = s[:k] / np.sqrt(yc.shape[0] * yc.shape[1])
    c = np.zeros((lik.d_y, model.d_z))
    c[:, :k] = v * np.maximum(scale, 1e-6)
    lik.C.data[...] = c
    lik.D.data[...] = mean


def emission_mean(model: GenerativeModel, dataset_id: str, z) -> Tensor:
    lik = model.get(dataset_id).likelihood
    z = as_tensor(z)
    if z.shape[-1:] != (model.d_z,):
        raise DimensionError(f"latent has shape {z.shape}, expected (..., {model.d_z})")
    return z @ lik.C.T + lik.D


def emit(model: GenerativeModel, dataset_id: str, z) -> GaussianDiag:
    """p(y_t | z_t) = N(C z + D, diag R)."""
    mean = emission_mean(model, dataset_id, z)
    return GaussianDiag(mean, nd.broadcast_to(model.get(dataset_id).likelihood.R_diag, mean.shape))


def read_in(model: GenerativeModel, dataset_id: str, y) -> Tensor:
    y = as_tensor(y)
    d_y = model.d_y.get(dataset_id)
    if d_y is None:
        raise UnknownDatasetError(dataset_id)
    if y.shape[-1] != d_y:
        raise DimensionError(f"observations have {y.shape[-1]} channels, dataset {dataset_id!r} has {d_y}")
    return model.get(dataset_id).read_in(y)


def delta_for(model: GenerativeModel, e) -> LowRankDelta | None:
    """Hypernetwork factors for ``e`` (None for variants without a hypernetwork)."""
    if model.dynamics.tag == "lowrank":
        return hypernet_delta(model.dynamics.hypernet, e)
    return None


def rollout_mean(model: GenerativeModel, z0, steps: int, e=None) -> np.ndarray:
    """Noise-free propagation ``z_{k+1} = f(z_k; e)``; returns ``(..., steps, d_z)`` excluding z0."""
    z = as_tensor(np.asarray(z0, dtype=float))
    delta = delta_for(model, e)
    out = []
    for _ in range(steps):
        z = dynamics_mean(model.dynamics, z, e, delta)
        out.append(z.data)
    if not out:
        return np.zeros(z.shape[:-1] + (0, model.d_z))
    return np.stack(out, axis=-2)


def sample_trajectory(model: GenerativeModel, dataset_id: str, e, T: int, z1=None, seed: int = 0,
                      noise_free: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Ancestral sample ``(z_{1:T}, y_{1:T})``.  ``noise_free`` propagates and emits means."""
    if T < 1:
        raise ContractError("T must be at least 1")
    rng = np.random.default_rng(seed)
    ds = model.get(dataset_id)
    d_z = model.d_z
    if z1 is None:
        z1 = model.mu0.data if noise_free else model.mu0.data + rng.standard_normal(d_z)
    z = np.empty((T, d_z))
    z[0] = np.asarray(z1, dtype=float)
    delta = delta_for(model, e)
    q_sd = np.sqrt(ds.noise.Q_diag.data)
    for t in range(1, T):
        z[t] = dynamics_mean(model.dynamics, z[t - 1], e, delta).data
        if not noise_free:
            z[t] += q_sd * rng.standard_normal(d_z)
    y = emission_mean(model, dataset_id, z).data
    if not noise_free:
        y = y + np.sqrt(ds.likelihood.R_diag.data) * rng.standard_normal(y.shape)
    return z, y
