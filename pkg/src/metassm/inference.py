"""Amortized variational inference and the training objectives.

Shared encoders (one set for every dataset):

* embedding encoder: GRU over read-in features, head on the final state,
  per-trial Gaussians averaged into one posterior per dataset batch;
* state encoder: (bi)GRU over ``concat(ybar_t, e)`` with a per-step head.

Three objectives are provided: the factorized ELBO (``elbo``), a particle
bound without resampling (``vsmc_bound``), and an innovation-based ELBO
that pushes samples through the dynamics (``dvbf_elbo``).  All of them are
summed over datasets and over the trials in each batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ndcompute as nd
from .dynamics import dynamics_mean, embedding_penalty
from .errors import ContractError, DimensionError, NumericError, UsageError
from .ndcompute import GRUParams, GaussianDiag, Tensor, VARIANCE_FLOOR, as_tensor, gru_sequence
from .ssm import GenerativeModel, delta_for, embedding_prior, emission_mean, read_in

OBJECTIVES = ("dkf", "vsmc", "dvbf")
STATE_DIRECTIONS = ("bi", "forward", "backward")


def _head_init(rng, d_in, d_out):
    bound = 1.0 / np.sqrt(d_in)
    return (Tensor(rng.uniform(-bound, bound, size=(d_in, d_out)), requires_grad=True),
            Tensor(np.zeros(d_out), requires_grad=True))


def _split_head(out: Tensor, d: int) -> GaussianDiag:
    return GaussianDiag(out[..., :d], nd.softplus(out[..., d:]) + VARIANCE_FLOOR)


@dataclass
class EmbeddingEncoderParams:
    fwd: GRUParams
    head_W: Tensor  # (H or 2H, 2 d_e)
    head_b: Tensor
    bwd: GRUParams | None = None

    def __post_init__(self):
        width = self.fwd.hidden * (2 if self.bwd is not None else 1)
        if self.head_W.shape[0] != width or self.head_W.shape[1] % 2:
            raise DimensionError(f"embedding head {self.head_W.shape} does not fit GRU width {width}")

    @property
    def d_e(self) -> int:
        return self.head_W.shape[1] // 2

    @property
    def bidirectional(self) -> bool:
        return self.bwd is not None

    def tensors(self) -> dict[str, Tensor]:
        out = {f"fwd.{k}": v for k, v in self.fwd.tensors().items()}
        if self.bwd is not None:
            out.update({f"bwd.{k}": v for k, v in self.bwd.tensors().items()})
        out["head.W"] = self.head_W
        out["head.b"] = self.head_b
        return out

    @classmethod
    def init(cls, d_in, hidden, d_e, rng, bidirectional=False):
        fwd = GRUParams.init(d_in, hidden, rng)
        bwd = GRUParams.init(d_in, hidden, rng) if bidirectional else None
        W, b = _head_init(rng, hidden * (2 if bidirectional else 1), 2 * d_e)
        return cls(fwd, W, b, bwd)


@dataclass
class StateEncoderParams:
    direction: str
    cells: list[GRUParams]   # one per direction, forward first
    head_W: Tensor           # (n_dirs * H, 2 d_z)
    head_b: Tensor

    def __post_init__(self):
        if self.direction not in STATE_DIRECTIONS:
            raise ContractError(f"state encoder direction must be one of {STATE_DIRECTIONS}")
        n = 2 if self.direction == "bi" else 1
        if len(self.cells) != n:
            raise ContractError(f"{self.direction} state encoder needs {n} GRU cell(s)")
        if self.head_W.shape[0] != n * self.cells[0].hidden or self.head_W.shape[1] % 2:
            raise DimensionError("state head does not match GRU width")

    @property
    def d_z(self) -> int:
        return self.head_W.shape[1] // 2

    @property
    def d_in(self) -> int:
        return self.cells[0].d_in

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for i, c in enumerate(self.cells):
            out.update({f"cell{i}.{k}": v for k, v in c.tensors().items()})
        out["head.W"] = self.head_W
        out["head.b"] = self.head_b
        return out

    @classmethod
    def init(cls, d_in, hidden, d_z, rng, direction="bi"):
        n = 2 if direction == "bi" else 1
        cells = [GRUParams.init(d_in, hidden, rng) for _ in range(n)]
        W, b = _head_init(rng, n * hidden, 2 * d_z)
        return cls(direction, cells, W, b)


@dataclass
class EncoderConfig:
    embed_hidden: int = 16
    state_hidden: int = 64
    embed_bidirectional: bool = False
    state_direction: str = "bi"

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class Encoders:
    config: EncoderConfig
    embedding: EmbeddingEncoderParams
    state: StateEncoderParams

    @classmethod
    def create(cls, model: GenerativeModel, config: EncoderConfig, rng) -> "Encoders":
        c, mc = config, model.config
        emb = EmbeddingEncoderParams.init(mc.d_ybar, c.embed_hidden, mc.d_e, rng, c.embed_bidirectional)
        st = StateEncoderParams.init(mc.d_ybar + mc.d_e, c.state_hidden, mc.d_z, rng, c.state_direction)
        return cls(c, emb, st)

    def tensors(self) -> dict[str, Tensor]:
        out = {f"encoders/embedding/{k}": v for k, v in self.embedding.tensors().items()}
        out.update({f"encoders/state/{k}": v for k, v in self.state.tensors().items()})
        return out


# encoders ---------------------------------------------------------------------

def _as_batch(ybar) -> Tensor:
    ybar = as_tensor(ybar)
    if ybar.ndim != 3:
        raise DimensionError(f"expected (trials, T, features), got {ybar.shape}")
    if ybar.shape[0] == 0 or ybar.shape[1] == 0:
        raise UsageError("cannot encode an empty batch")
    return ybar


def embedding_per_trial(enc: EmbeddingEncoderParams, ybar) -> GaussianDiag:
    """Per-trial embedding posteriors, shape ``(trials, d_e)``."""
    ybar = _as_batch(ybar)
    if ybar.shape[-1] != enc.fwd.d_in:
        raise DimensionError(f"embedding encoder expects {enc.fwd.d_in} features, got {ybar.shape[-1]}")
    h = gru_sequence(ybar, enc.fwd)[:, -1]
    if enc.bwd is not None:
        h = nd.concat([h, gru_sequence(ybar, enc.bwd, reverse=True)[:, 0]], axis=-1)
    return _split_head(h @ enc.head_W + enc.head_b, enc.d_e)


def aggregate(per_trial: GaussianDiag) -> GaussianDiag:
    """Average means and variances over trials."""
    return GaussianDiag(nd.mean(per_trial.mean, axis=0), nd.mean(per_trial.var, axis=0))


def infer_embedding(enc: EmbeddingEncoderParams, ybar) -> GaussianDiag:
    return aggregate(embedding_per_trial(enc, ybar))


def infer_states(enc: StateEncoderParams, ybar, e) -> GaussianDiag:
    """Per-step posteriors over ``z``, shape ``(trials, T, d_z)``.

    ``e`` is one embedding vector shared by all trials, or one row per trial.
    """
    ybar = _as_batch(ybar)
    B, T, _ = ybar.shape
    e = as_tensor(e)
    d_e = enc.d_in - ybar.shape[-1]
    if e.shape not in ((d_e,), (B, d_e)) or d_e < 1:
        raise DimensionError(f"embedding {e.shape} incompatible with encoder input {enc.d_in}")
    if e.ndim == 1:
        eb = nd.broadcast_to(e, (B, T, d_e))
    else:
        eb = nd.broadcast_to(e.reshape(B, 1, d_e), (B, T, d_e))
    x = nd.concat([ybar, eb], axis=-1)
    if enc.direction == "bi":
        h = nd.concat([gru_sequence(x, enc.cells[0]), gru_sequence(x, enc.cells[1], reverse=True)], axis=-1)
    else:
        h = gru_sequence(x, enc.cells[0], reverse=enc.direction == "backward")
    return _split_head(h @ enc.head_W + enc.head_b, enc.d_z)


# reports ----------------------------------------------------------------------

@dataclass
class ElboReport:
    """Objective terms; ``total = recon - kl_state - kl_embed - lam * penalty``."""

    total: Tensor
    recon: Tensor
    kl_state: Tensor
    kl_embed: Tensor
    penalty: Tensor
    lam: float = 0.0
    trials: int = 0
    per_dataset: dict[str, "ElboReport"] = field(default_factory=dict)

    def as_floats(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("total", "recon", "kl_state", "kl_embed", "penalty")}

    def check_finite(self) -> None:
        for k, v in self.as_floats().items():
            if not math.isfinite(v):
                raise NumericError(f"objective term {k} is not finite")


def _sum_reports(parts: dict[str, ElboReport], lam: float) -> ElboReport:
    zero = as_tensor(0.0)
    acc = {k: zero for k in ("total", "recon", "kl_state", "kl_embed", "penalty")}
    for r in parts.values():
        for k in acc:
            acc[k] = acc[k] + getattr(r, k)
    return ElboReport(**acc, lam=lam, trials=sum(r.trials for r in parts.values()), per_dataset=parts)


def _make_report(recon, kl_state, kl_embed, penalty, lam, trials) -> ElboReport:
    total = recon - kl_state - kl_embed - lam * penalty
    return ElboReport(total, recon, kl_state, kl_embed, penalty, lam, trials)


# objectives -------------------------------------------------------------------

def _embed_kl(q_e: GaussianDiag, e: Tensor, analytic: bool) -> Tensor:
    prior = embedding_prior(len(q_e))
    if analytic:
        return nd.gaussian_kl(q_e, prior)
    return nd.gaussian_logpdf(e, q_e) - nd.gaussian_logpdf(e, prior)


def _kl_scale(mode: str, trials: int) -> float:
    if mode == "batch":
        return 1.0
    if mode == "trial":
        return float(trials)
    raise ContractError(f"embed_kl mode must be 'batch' or 'trial', got {mode!r}")


def elbo_terms(model: GenerativeModel, dataset_id: str, y, q_e: GaussianDiag, e, q_z: GaussianDiag,
               eps_z, lam: float = 1e-3, analytic_kl: bool = True, embed_kl: str = "batch") -> ElboReport:
    """Single-sample ELBO for one dataset given its posteriors and a sampled ``e``.

    ``y`` is ``(B, T, d_y)``; ``q_z`` and ``eps_z`` are ``(B, T, d_z)``.
    """
    y = as_tensor(y)
    e = as_tensor(e)
    B, T = y.shape[:2]
    if q_z.shape != (B, T, model.d_z):
        raise DimensionError(f"state posterior {q_z.shape} does not match data {(B, T, model.d_z)}")
    z = nd.reparam_sample(q_z, eps_z)
    delta = delta_for(model, e)
    ds = model.get(dataset_id)

    y_mean = emission_mean(model, dataset_id, z)
    recon = nd.gaussian_logpdf(y, GaussianDiag(y_mean, nd.broadcast_to(ds.likelihood.R_diag, y_mean.shape)))

    first = GaussianDiag(q_z.mean[:, :1], q_z.var[:, :1])
    p_first = GaussianDiag(nd.broadcast_to(model.mu0, (B, 1, model.d_z)), np.ones((B, 1, model.d_z)))
    rest = GaussianDiag(q_z.mean[:, 1:], q_z.var[:, 1:])
    if T > 1:
        f = dynamics_mean(model.dynamics, z[:, :-1], e, delta)
        p_rest = GaussianDiag(f, nd.broadcast_to(ds.noise.Q_diag, f.shape))
    if analytic_kl:
        kl_state = nd.gaussian_kl(first, p_first)
        if T > 1:
            kl_state = kl_state + nd.gaussian_kl(rest, p_rest)
    else:
        kl_state = nd.gaussian_logpdf(z[:, :1], first) - nd.gaussian_logpdf(z[:, :1], p_first)
        if T > 1:
            kl_state = kl_state + nd.gaussian_logpdf(z[:, 1:], rest) - nd.gaussian_logpdf(z[:, 1:], p_rest)

    kl_e = _kl_scale(embed_kl, B) * _embed_kl(q_e, e, analytic_kl)
    penalty = embedding_penalty(model.dynamics, e, delta)
    return _make_report(recon, kl_state, kl_e, penalty, lam, B)


def _group_by_length(ybars: dict[str, Tensor]) -> list[list[str]]:
    groups: dict[int, list[str]] = {}
    for k, v in ybars.items():
        groups.setdefault(v.shape[1], []).append(k)
    return list(groups.values())


def _shared_encode(fn, inputs: dict[str, Tensor], extra: dict | None = None) -> dict:
    """Run a shared encoder once per sequence length over the concatenated batch."""
    out = {}
    for ids in _group_by_length(inputs):
        if len(ids) == 1:
            k = ids[0]
            out[k] = fn(inputs[k], None if extra is None else extra[k])
            continue
        sizes = np.cumsum([inputs[k].shape[0] for k in ids])[:-1]
        x = nd.concat([inputs[k] for k in ids], axis=0)
        ex = None if extra is None else nd.concat([extra[k] for k in ids], axis=0)
        res = fn(x, ex)
        bounds = [0, *sizes, x.shape[0]]
        for k, a, b in zip(ids, bounds[:-1], bounds[1:]):
            out[k] = GaussianDiag(res.mean[a:b], res.var[a:b])
    return out


def encode_embeddings(model: GenerativeModel, enc: Encoders, batches: dict) -> tuple[dict, dict]:
    """Read-in features and aggregated embedding posteriors for every dataset batch."""
    if not batches:
        raise UsageError("no dataset batches given")
    ybars = {k: read_in(model, k, y) for k, y in batches.items()}
    per_trial = _shared_encode(lambda x, _: embedding_per_trial(enc.embedding, x), ybars)
    return ybars, {k: aggregate(v) for k, v in per_trial.items()}


def encode_states(enc: Encoders, ybars: dict, es: dict) -> dict:
    rows = {k: nd.broadcast_to(as_tensor(es[k]), (ybars[k].shape[0], es[k].shape[-1])) for k in ybars}
    return _shared_encode(lambda x, ex: infer_states(enc.state, x, ex), ybars, rows)


def _draw_embeddings(q_es: dict, rng, e_scale: float = 1.0) -> dict:
    # e_scale=0 hides the embedding from dynamics and state encoder (warm-up)
    out = {k: nd.reparam_sample(q, rng.standard_normal(q.shape)) for k, q in q_es.items()}
    if e_scale != 1.0:
        out = {k: e * e_scale for k, e in out.items()}
    return out


def elbo(model: GenerativeModel, enc: Encoders, batches: dict, rng: np.random.Generator, lam: float = 1e-3,
         analytic_kl: bool = True, embed_kl: str = "batch", e_scale: float = 1.0) -> ElboReport:
    """Multi-dataset ELBO.  ``batches`` maps dataset id to a ``(B, T, d_y)`` array.

    Noise is drawn from ``rng`` in a fixed order: one embedding draw per dataset,
    then the state noise per dataset, both in ``batches`` order.
    """
    ybars, q_es = encode_embeddings(model, enc, batches)
    es = _draw_embeddings(q_es, rng, e_scale)
    q_zs = encode_states(enc, ybars, es)
    parts = {}
    for k, y in batches.items():
        eps = rng.standard_normal(q_zs[k].shape)
        parts[k] = elbo_terms(model, k, y, q_es[k], es[k], q_zs[k], eps, lam, analytic_kl, embed_kl)
    report = _sum_reports(parts, lam)
    report.check_finite()
    return report


def vsmc_terms(model: GenerativeModel, dataset_id: str, y, q_e: GaussianDiag, e, q_z: GaussianDiag,
               eps_z, lam: float = 1e-3, carry_weights: bool = True, embed_kl: str = "batch") -> ElboReport:
    """Particle bound for one dataset; ``eps_z`` is ``(B, N, T, d_z)``.

    ``recon`` holds the particle log-likelihood estimate summed over trials,
    ``kl_state`` is zero and ``kl_embed`` is ``log q(e) - log p(e)``.
    """
    y = as_tensor(y)
    e = as_tensor(e)
    eps_z = np.asarray(eps_z)
    B, T = y.shape[:2]
    if eps_z.ndim != 4 or eps_z.shape[0] != B or eps_z.shape[2:] != (T, model.d_z):
        raise DimensionError(f"particle noise {eps_z.shape} does not match (B, N, T, d_z)")
    N = eps_z.shape[1]
    if N < 1:
        raise UsageError("need at least one particle")
    d_z = model.d_z
    ds = model.get(dataset_id)
    delta = delta_for(model, e)

    qm = q_z.mean.reshape(B, 1, T, d_z)
    qv = q_z.var.reshape(B, 1, T, d_z)
    z = qm + nd.sqrt(qv) * eps_z                                   # (B, N, T, d_z)
    shape = (B, N, T, d_z)
    qm_b, qv_b = nd.broadcast_to(qm, shape), nd.broadcast_to(qv, shape)

    def per_step_logpdf(x, mean, var):  # -> (B, N, T)
        return -0.5 * nd.sum_(nd.square(x - mean) / var + nd.log(var) + math.log(2 * math.pi), axis=-1)

    y_mean = emission_mean(model, dataset_id, z)
    R = ds.likelihood.R_diag
    yb = y.reshape(B, 1, T, y.shape[-1])
    log_lik = -0.5 * nd.sum_(nd.square(yb - y_mean) / R + nd.log(R) + math.log(2 * math.pi), axis=-1)

    log_q = per_step_logpdf(z, qm_b, qv_b)
    mu0 = nd.broadcast_to(model.mu0, (B, N, 1, d_z))
    log_p0 = per_step_logpdf(z[:, :, :1], mu0, np.ones((B, N, 1, d_z)))
    if T > 1:
        f = dynamics_mean(model.dynamics, z[:, :, :-1], e, delta)
        Q = nd.broadcast_to(ds.noise.Q_diag, f.shape)
        log_p = nd.concat([log_p0, per_step_logpdf(z[:, :, 1:], f, Q)], axis=-1)
    else:
        log_p = log_p0
    log_w = log_lik + log_p - log_q                                # (B, N, T)

    log_n = math.log(N)
    if carry_weights:
        # telescoped form of sum_t log sum_i Wbar_{t-1}^i w_t^i
        bound = nd.logsumexp(nd.sum_(log_w, axis=-1), axis=1) - log_n
    else:
        bound = nd.sum_(nd.logsumexp(log_w, axis=1) - log_n, axis=-1)
    recon = nd.sum_(bound)

    kl_e = _kl_scale(embed_kl, B) * _embed_kl(q_e, e, analytic=False)
    penalty = embedding_penalty(model.dynamics, e, delta)
    return _make_report(recon, as_tensor(0.0), kl_e, penalty, lam, B)


def vsmc_objective(model: GenerativeModel, enc: Encoders, batches: dict, rng: np.random.Generator,
                   particles: int = 4, lam: float = 1e-3, carry_weights: bool = True,
                   embed_kl: str = "batch", e_scale: float = 1.0) -> ElboReport:
    if particles < 1:
        raise UsageError("need at least one particle")
    ybars, q_es = encode_embeddings(model, enc, batches)
    es = _draw_embeddings(q_es, rng, e_scale)
    q_zs = encode_states(enc, ybars, es)
    parts = {}
    for k, y in batches.items():
        B, T, d_z = q_zs[k].shape
        eps = rng.standard_normal((B, T, particles, d_z)).transpose(0, 2, 1, 3)
        parts[k] = vsmc_terms(model, k, y, q_es[k], es[k], q_zs[k], eps, lam, carry_weights, embed_kl)
    report = _sum_reports(parts, lam)
    report.check_finite()
    return report


def vsmc_bound(model: GenerativeModel, enc: Encoders, dataset_id: str, y, particles: int,
               rng: np.random.Generator, carry_weights: bool = True) -> Tensor:
    """The particle bound (embedding terms included, no penalty) for one dataset batch."""
    r = vsmc_objective(model, enc, {dataset_id: y}, rng, particles, lam=0.0, carry_weights=carry_weights)
    return r.total


def dvbf_terms(model: GenerativeModel, dataset_id: str, y, q_e: GaussianDiag, e, q_u: GaussianDiag,
               eps_u, lam: float = 1e-3, embed_kl: str = "batch") -> ElboReport:
    """Innovation ELBO: ``z_1 = mu0 + u_1``, ``z_t = f(z_{t-1}) + sqrt(Q) u_t``."""
    y = as_tensor(y)
    e = as_tensor(e)
    B, T = y.shape[:2]
    ds = model.get(dataset_id)
    delta = delta_for(model, e)
    u = nd.reparam_sample(q_u, eps_u)  # (B, T, d_z)
    q_sd = nd.sqrt(ds.noise.Q_diag)
    z = model.mu0 + u[:, 0]
    zs = [z]
    for t in range(1, T):
        z = dynamics_mean(model.dynamics, z, e, delta) + q_sd * u[:, t]
        zs.append(z)
    Z = nd.stack(zs, axis=1)
    y_mean = emission_mean(model, dataset_id, Z)
    recon = nd.gaussian_logpdf(y, GaussianDiag(y_mean, nd.broadcast_to(ds.likelihood.R_diag, y_mean.shape)))
    std = GaussianDiag(np.zeros(q_u.shape), np.ones(q_u.shape))
    kl_u = nd.gaussian_kl(q_u, std)
    kl_e = _kl_scale(embed_kl, B) * _embed_kl(q_e, e, True)
    penalty = embedding_penalty(model.dynamics, e, delta)
    return _make_report(recon, kl_u, kl_e, penalty, lam, B)


def dvbf_elbo(model: GenerativeModel, enc: Encoders, batches: dict, rng: np.random.Generator,
              lam: float = 1e-3, embed_kl: str = "batch", e_scale: float = 1.0) -> ElboReport:
    """Needs a backward-in-time state encoder; its head outputs q(u_t)."""
    if enc.state.direction != "backward":
        raise UsageError("the innovation objective needs a backward state encoder (state_direction='backward')")
    ybars, q_es = encode_embeddings(model, enc, batches)
    es = _draw_embeddings(q_es, rng, e_scale)
    q_us = encode_states(enc, ybars, es)
    parts = {}
    for k, y in batches.items():
        eps = rng.standard_normal(q_us[k].shape)
        parts[k] = dvbf_terms(model, k, y, q_es[k], es[k], q_us[k], eps, lam, embed_kl)
    report = _sum_reports(parts, lam)
    report.check_finite()
    return report


def objective(tag: str, model: GenerativeModel, enc: Encoders, batches: dict, rng: np.random.Generator,
              lam: float = 1e-3, particles: int = 4, analytic_kl: bool = True, embed_kl: str = "batch",
              carry_weights: bool = True, e_scale: float = 1.0) -> ElboReport:
    tag = tag.lower()
    if tag == "dkf":
        return elbo(model, enc, batches, rng, lam, analytic_kl, embed_kl, e_scale)
    if tag == "vsmc":
        return vsmc_objective(model, enc, batches, rng, particles, lam, carry_weights, embed_kl, e_scale)
    if tag == "dvbf":
        return dvbf_elbo(model, enc, batches, rng, lam, embed_kl, e_scale)
    raise ContractError(f"unknown objective {tag!r}; choose from {OBJECTIVES}")


def posterior_means(model: GenerativeModel, enc: Encoders, dataset_id: str, y) -> tuple[np.ndarray, np.ndarray]:
    """Aggregated embedding mean and per-step state means (no sampling)."""
    ybar = read_in(model, dataset_id, y)
    q_e = infer_embedding(enc.embedding, ybar)
    q_z = infer_states(enc.state, ybar, q_e.mean)
    return q_e.mean.data.copy(), q_z.mean.data.copy()
