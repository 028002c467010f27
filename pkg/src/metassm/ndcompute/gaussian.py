"""Diagonal Gaussian primitives: KL, log-density, reparameterized sampling."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import DimensionError, DomainError
from . import tensor as nd
from .tensor import Tensor, as_tensor

VARIANCE_FLOOR = 1e-6
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class GaussianDiag:
    """Factorized Gaussian; ``mean`` and ``var`` share a shape ``(..., d)``."""

    mean: Tensor
    var: Tensor
    floor: float = VARIANCE_FLOOR

    def __post_init__(self):
        self.mean = as_tensor(self.mean)
        self.var = as_tensor(self.var)
        if self.mean.shape != self.var.shape:
            raise DimensionError(f"mean {self.mean.shape} and variance {self.var.shape} differ")
        if np.any(self.var.data <= 0):
            raise DomainError("variance must be strictly positive")
        if np.any(self.var.data < self.floor * (1 - 1e-9)):
            raise DomainError(f"variance below floor {self.floor}")

    @classmethod
    def from_raw(cls, mean, raw, floor: float = VARIANCE_FLOOR) -> "GaussianDiag":
        """Build from an unconstrained variance parameter via softplus + floor."""
        return cls(mean, nd.softplus(raw) + floor, floor)

    @classmethod
    def standard(cls, d: int) -> "GaussianDiag":
        return cls(np.zeros(d), np.ones(d))

    @property
    def shape(self) -> tuple:
        return self.mean.shape

    def __len__(self) -> int:
        return self.mean.shape[-1]


def _check_pair(a: GaussianDiag, b: GaussianDiag) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"gaussian shapes {a.shape} and {b.shape} differ") from None
    if a.shape[-1:] != b.shape[-1:]:
        raise DimensionError(f"gaussian lengths {a.shape[-1:]} and {b.shape[-1:]} differ")
    for g in (a, b):
        if np.any(g.var.data <= 0):
            raise DomainError("variance must be strictly positive")


def gaussian_kl(q: GaussianDiag, p: GaussianDiag) -> Tensor:
    """KL(q || p) summed over every coordinate (and any batch axes)."""
    _check_pair(q, p)
    ratio = q.var / p.var
    diff = q.mean - p.mean
    terms = ratio + nd.square(diff) / p.var - 1.0 - nd.log(ratio)
    return 0.5 * nd.sum_(terms)


def gaussian_logpdf(x, dist: GaussianDiag) -> Tensor:
    """Sum of per-coordinate log densities of ``x`` under ``dist``."""
    x = as_tensor(x)
    if np.any(dist.var.data <= 0):
        raise DomainError("variance must be strictly positive")
    try:
        np.broadcast_shapes(x.shape, dist.shape)
    except ValueError:
        raise DimensionError(f"x {x.shape} does not match distribution {dist.shape}") from None
    if x.shape[-1:] != dist.shape[-1:]:
        raise DimensionError(f"x {x.shape} does not match distribution {dist.shape}")
    z = nd.square(x - dist.mean) / dist.var
    n = np.broadcast_shapes(x.shape, dist.shape)
    count = int(np.prod(n))
    return -0.5 * (nd.sum_(z) + nd.sum_(nd.broadcast_to(nd.log(dist.var), n)) + count * _LOG_2PI)


def reparam_sample(dist: GaussianDiag, noise) -> Tensor:
    """``mean + sqrt(var) * noise``; differentiable in mean and variance."""
    noise = as_tensor(noise)
    if noise.shape != dist.shape:
        try:
            if np.broadcast_shapes(noise.shape, dist.shape) != noise.shape:
                raise ValueError
        except ValueError:
            raise DimensionError(f"noise {noise.shape} does not match distribution {dist.shape}") from None
    return dist.mean + nd.sqrt(dist.var) * noise
