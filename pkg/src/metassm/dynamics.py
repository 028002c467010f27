"""Embedding-conditioned latent dynamics.

The shared transition mean is a two-layer MLP::

    f(z) = W_o s((W_hh + dW_hh) s((W_in + dW_in) z + b_in) + b_hh) + b_o

where ``s`` is a point nonlinearity and the perturbations ``dW = U V^T`` are
produced from a dataset embedding ``e`` by a hypernetwork.  Three baseline
parameterizations share the same MLP core:

* ``shared``           -- no perturbation, ``e`` ignored;
* ``embedding_input``  -- ``e`` is concatenated to ``z`` at the input;
* ``linear_adapter``   -- every parameter is shifted by ``A e`` (no bias).

Matrices are stored ``(rows, cols)`` and applied to row-vector batches, i.e.
``z @ W.T``; any number of leading batch axes is allowed on ``z``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ndcompute as nd
from .errors import ContractError, DimensionError
from .ndcompute import Tensor, as_tensor

NONLINEARITIES = {"tanh": nd.tanh, "relu": nd.relu}
ADAPTABLE = ("W_in", "W_hh")
_PARAM_ORDER = ("W_in", "W_hh", "W_o", "b_in", "b_hh", "b_o")

VARIANT_ALIASES = {
    "lowrank": "lowrank",
    "lowrankhypernet": "lowrank",
    "low_rank_hypernet": "lowrank",
    "ours": "lowrank",
    "shared": "shared",
    "sharedonly": "shared",
    "shared_only": "shared",
    "shared_dynamics": "shared",
    "embedding_input": "embedding_input",
    "embeddinginput": "embedding_input",
    "linear_adapter": "linear_adapter",
    "linearadapter": "linear_adapter",
}


def canonical_variant(tag: str) -> str:
    key = tag.strip().lower().replace("-", "_")
    if key not in VARIANT_ALIASES:
        key = key.replace("_", "")
    try:
        return VARIANT_ALIASES[key]
    except KeyError:
        raise ContractError(f"unknown dynamics variant {tag!r}") from None


def _linear_init(rng, rows, cols):
    bound = 1.0 / np.sqrt(cols)
    return rng.uniform(-bound, bound, size=(rows, cols)), rng.uniform(-bound, bound, size=rows)


@dataclass
class SharedDynamicsParams:
    W_in: Tensor
    W_hh: Tensor
    W_o: Tensor
    b_in: Tensor
    b_hh: Tensor
    b_o: Tensor
    nonlinearity: str = "tanh"

    def __post_init__(self):
        d1, d_in = self.W_in.shape
        d2, d1b = self.W_hh.shape
        d_z, d2b = self.W_o.shape
        if min(d1, d2, d_z, d_in) <= 0 or d1 != d1b or d2 != d2b:
            raise DimensionError(
                f"inconsistent dynamics shapes W_in {self.W_in.shape}, W_hh {self.W_hh.shape}, W_o {self.W_o.shape}")
        if self.b_in.shape != (d1,) or self.b_hh.shape != (d2,) or self.b_o.shape != (d_z,):
            raise DimensionError("dynamics bias shapes do not match weights")
        if self.nonlinearity not in NONLINEARITIES:
            raise ContractError(f"unknown nonlinearity {self.nonlinearity!r}")

    @property
    def d_z(self) -> int:
        return self.W_o.shape[0]

    @property
    def d_in(self) -> int:
        return self.W_in.shape[1]

    @property
    def hidden(self) -> tuple[int, int]:
        return self.W_in.shape[0], self.W_hh.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {k: getattr(self, k) for k in _PARAM_ORDER}

    @classmethod
    def init(cls, d_z: int, d1: int, d2: int, rng: np.random.Generator,
             d_extra: int = 0, nonlinearity: str = "tanh") -> "SharedDynamicsParams":
        W_in, b_in = _linear_init(rng, d1, d_z + d_extra)
        W_hh, b_hh = _linear_init(rng, d2, d1)
        W_o, b_o = _linear_init(rng, d_z, d2)
        t = lambda a: Tensor(a, requires_grad=True)
        return cls(t(W_in), t(W_hh), t(W_o), t(b_in), t(b_hh), t(b_o), nonlinearity)


@dataclass
class LowRankDelta:
    """Per adapted matrix, factors ``U (rows, r)`` and ``V (cols, r)``; dense delta ``U V^T``."""

    factors: dict[str, tuple[Tensor, Tensor]]

    def dense(self, name: str) -> Tensor:
        U, V = self.factors[name]
        return U @ V.T

    @property
    def rank(self) -> int:
        return next(iter(self.factors.values()))[0].shape[1] if self.factors else 0


@dataclass
class HypernetParams:
    """MLP ``e -> [U_1, V_1, U_2, V_2, ...]`` (flattened row-major, in ``adapted`` order)."""

    layers: list[tuple[Tensor, Tensor]]
    rank: int
    adapted: tuple[str, ...]
    shapes: dict[str, tuple[int, int]]
    activation: str = "tanh"

    def __post_init__(self):
        for name in self.adapted:
            if name not in ADAPTABLE:
                raise ContractError(f"cannot adapt {name!r}; choose from {ADAPTABLE}")
            rows, cols = self.shapes[name]
            if self.rank > min(rows, cols):
                raise DimensionError(f"rank {self.rank} exceeds min dimension of {name} {self.shapes[name]}")
        if self.layers[-1][0].shape[1] != self.output_size:
            raise DimensionError(
                f"hypernet output {self.layers[-1][0].shape[1]} != required {self.output_size}")

    @property
    def d_e(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def output_size(self) -> int:
        return sum((r + c) * self.rank for r, c in (self.shapes[n] for n in self.adapted))

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for i, (W, b) in enumerate(self.layers):
            out[f"layer{i}.W"] = W
            out[f"layer{i}.b"] = b
        return out

    @classmethod
    def init(cls, d_e: int, hidden: tuple[int, ...], rank: int, adapted: tuple[str, ...],
             shapes: dict[str, tuple[int, int]], rng: np.random.Generator) -> "HypernetParams":
        adapted = tuple(adapted)
        out_size = sum((shapes[n][0] + shapes[n][1]) * rank for n in adapted)
        widths = (d_e, *hidden, out_size)
        layers = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            W, bias = _linear_init(rng, b, a)
            W, bias = W.T.copy(), bias
            if i == len(widths) - 2:
                # zero the U blocks only: U V^T = 0 for every e, yet both factors get gradients
                offset = 0
                for n in adapted:
                    rows, cols = shapes[n]
                    W[:, offset:offset + rows * rank] = 0.0
                    bias[offset:offset + rows * rank] = 0.0
                    offset += (rows + cols) * rank
            layers.append((Tensor(W, requires_grad=True), Tensor(bias, requires_grad=True)))
        return cls(layers, rank, adapted, dict(shapes))


@dataclass
class DynamicsVariant:
    tag: str
    shared: SharedDynamicsParams
    d_e: int = 1
    hypernet: HypernetParams | None = None
    adapter: Tensor | None = None  # (n_adapted_params, d_e), linear_adapter only
    adapter_targets: tuple[str, ...] = _PARAM_ORDER
    residual: bool = False

    def __post_init__(self):
        self.tag = canonical_variant(self.tag)
        if self.tag == "lowrank" and self.hypernet is None:
            raise ContractError("lowrank variant needs hypernet parameters")
        if self.tag == "linear_adapter":
            if self.adapter is None:
                raise ContractError("linear_adapter variant needs an adapter matrix")
            n = sum(self.shared.tensors()[k].size for k in self.adapter_targets)
            if self.adapter.shape != (n, self.d_e):
                raise DimensionError(f"adapter shape {self.adapter.shape} != {(n, self.d_e)}")
        expect_in = self.shared.d_z + (self.d_e if self.tag == "embedding_input" else 0)
        if self.shared.d_in != expect_in:
            raise DimensionError(f"W_in has {self.shared.d_in} columns, variant {self.tag} needs {expect_in}")

    @property
    def d_z(self) -> int:
        return self.shared.d_z

    def tensors(self) -> dict[str, Tensor]:
        out = {f"shared.{k}": v for k, v in self.shared.tensors().items()}
        if self.hypernet is not None:
            out.update({f"hypernet.{k}": v for k, v in self.hypernet.tensors().items()})
        if self.adapter is not None:
            out["adapter.A"] = self.adapter
        return out

    @classmethod
    def build(cls, tag: str, d_z: int, d_e: int, rng: np.random.Generator, hidden: tuple[int, int] = (32, 32),
              rank: int = 1, adapted: tuple[str, ...] = ADAPTABLE, hyper_hidden: tuple[int, ...] = (16, 16),
              nonlinearity: str = "tanh", residual: bool = False,
              adapter_targets: tuple[str, ...] = _PARAM_ORDER) -> "DynamicsVariant":
        tag = canonical_variant(tag)
        bad = set(adapted) - set(ADAPTABLE)
        if bad:
            raise ContractError(f"cannot adapt {sorted(bad)}; choose from {ADAPTABLE}")
        d1, d2 = hidden
        extra = d_e if tag == "embedding_input" else 0
        shared = SharedDynamicsParams.init(d_z, d1, d2, rng, d_extra=extra, nonlinearity=nonlinearity)
        hypernet = adapter = None
        if tag == "lowrank":
            shapes = {"W_in": (d1, d_z), "W_hh": (d2, d1)}
            hypernet = HypernetParams.init(d_e, tuple(hyper_hidden), rank, tuple(adapted),
                                           {k: shapes[k] for k in adapted}, rng)
        elif tag == "linear_adapter":
            n = sum(shared.tensors()[k].size for k in adapter_targets)
            adapter = Tensor(np.zeros((n, d_e)), requires_grad=True)
        return cls(tag, shared, d_e, hypernet, adapter, tuple(adapter_targets), residual)


def _check_e(e, d_e: int) -> Tensor:
    e = as_tensor(e)
    if e.shape != (d_e,):
        raise DimensionError(f"embedding has shape {e.shape}, expected ({d_e},)")
    return e


def hypernet_delta(hp: HypernetParams, e) -> LowRankDelta:
    """Map one embedding vector to low-rank factors for each adapted matrix."""
    e = _check_e(e, hp.d_e)
    act = NONLINEARITIES[hp.activation]
    h = e
    last = len(hp.layers) - 1
    for i, (W, b) in enumerate(hp.layers):
        h = h @ W + b
        if i < last:
            h = act(h)
    factors = {}
    offset = 0
    r = hp.rank
    for name in hp.adapted:
        rows, cols = hp.shapes[name]
        U = h[offset:offset + rows * r].reshape(rows, r)
        offset += rows * r
        V = h[offset:offset + cols * r].reshape(cols, r)
        offset += cols * r
        factors[name] = (U, V)
    return LowRankDelta(factors)


def frobenius_penalty(d: LowRankDelta) -> Tensor:
    """Sum over adapted matrices of ||U V^T||_F, via trace((V^T V)(U^T U))."""
    total = as_tensor(0.0)
    for U, V in d.factors.values():
        gram = nd.sum_((V.T @ V) * (U.T @ U))
        total = total + nd.sqrt(gram)
    return total


def _adapter_deltas(v: DynamicsVariant, e: Tensor) -> dict[str, Tensor]:
    flat = e @ v.adapter.T
    deltas = {}
    offset = 0
    params = v.shared.tensors()
    for k in v.adapter_targets:
        shape = params[k].shape
        n = params[k].size
        deltas[k] = flat[offset:offset + n].reshape(shape)
        offset += n
    return deltas


def _mlp(params: dict[str, Tensor], x: Tensor, act, factors: dict | None = None) -> Tensor:
    pre = x @ params["W_in"].T + params["b_in"]
    if factors and "W_in" in factors:
        U, V = factors["W_in"]
        pre = pre + (x @ V) @ U.T
    h = act(pre)
    pre = h @ params["W_hh"].T + params["b_hh"]
    if factors and "W_hh" in factors:
        U, V = factors["W_hh"]
        pre = pre + (h @ V) @ U.T
    h = act(pre)
    return h @ params["W_o"].T + params["b_o"]


def dynamics_mean(v: DynamicsVariant, z, e=None, delta: LowRankDelta | None = None) -> Tensor:
    """Transition mean f(z; e) for a batch of latents ``z`` of shape ``(..., d_z)``.

    ``delta`` may be passed to reuse hypernetwork factors across calls.
    """
    z = as_tensor(z)
    if z.shape[-1:] != (v.d_z,):
        raise DimensionError(f"latent has shape {z.shape}, expected (..., {v.d_z})")
    act = NONLINEARITIES[v.shared.nonlinearity]
    params = v.shared.tensors()
    if v.tag == "shared":
        out = _mlp(params, z, act)
    elif v.tag == "lowrank":
        if delta is None:
            delta = hypernet_delta(v.hypernet, e)
        out = _mlp(params, z, act, delta.factors)
    elif v.tag == "embedding_input":
        e = _check_e(e, v.d_e)
        eb = nd.broadcast_to(e, z.shape[:-1] + (v.d_e,))
        out = _mlp(params, nd.concat([z, eb], axis=-1), act)
    else:
        e = _check_e(e, v.d_e)
        deltas = _adapter_deltas(v, e)
        shifted = {k: (p + deltas[k] if k in deltas else p) for k, p in params.items()}
        out = _mlp(shifted, z, act)
    return z + out if v.residual else out


def embedding_delta(v: DynamicsVariant, e) -> LowRankDelta | dict[str, Tensor] | None:
    """The embedding-conditioned parameter change of any variant (None if it has none)."""
    if v.tag == "lowrank":
        return hypernet_delta(v.hypernet, e)
    if v.tag == "linear_adapter":
        return _adapter_deltas(v, _check_e(e, v.d_e))
    return None


def embedding_penalty(v: DynamicsVariant, e=None, delta=None) -> Tensor:
    """Frobenius norm of the embedding-conditioned weight change (0 for unconditioned variants)."""
    if delta is None:
        delta = embedding_delta(v, e) if v.tag in ("lowrank", "linear_adapter") else None
    if delta is None:
        return as_tensor(0.0)
    if isinstance(delta, LowRankDelta):
        return frobenius_penalty(delta)
    total = as_tensor(0.0)
    for d in delta.values():
        total = total + nd.sqrt(nd.sum_(nd.square(d)))
    return total


def vector_field_grid(v: DynamicsVariant, e, grid) -> Tensor:
    """Displacements ``f(z; e) - z`` at every grid point (rows of ``grid``)."""
    z = as_tensor(grid)
    return dynamics_mean(v, z, e) - z


def make_grid(lo: float, hi: float, n: int) -> np.ndarray:
    """``n x n`` lattice on ``[lo, hi]^2`` as an ``(n*n, 2)`` array, row-major in z2 then z1."""
    axis = np.linspace(lo, hi, n)
    z1, z2 = np.meshgrid(axis, axis)
    return np.column_stack([z1.ravel(), z2.ravel()])


def export_vector_field(path: str | Path, grid: np.ndarray, displacement: np.ndarray) -> None:
    """Write ``z1 z2 dz1 dz2`` rows (one grid point per row) as a plain-text table."""
    grid = np.asarray(grid)
    displacement = np.asarray(displacement)
    if grid.shape[1] != 2 or displacement.shape != grid.shape:
        raise DimensionError("vector-field export needs 2-D latents")
    np.savetxt(path, np.hstack([grid, displacement]), fmt="%.10g", header="z1 z2 dz1 dz2")
