"""Gated recurrent units.

Gate layout follows the usual convention, with the three gate blocks
``[reset, update, candidate]`` packed along the last axis of the weights::

    r  = sigmoid(x W_r + b_xr + h U_r + b_hr)
    u  = sigmoid(x W_u + b_xu + h U_u + b_hu)
    n  = tanh(x W_n + b_xn + r * (h U_n + b_hn))
    h' = (1 - u) * n + u * h

:func:`gru_cell` composes tape primitives for one step.  :func:`gru_sequence`
runs a whole sequence as a single tape node with hand-written
backpropagation through time; it is what the encoders use.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DimensionError
from . import tensor as nd
from .tensor import Tensor, apply_op, as_tensor


@dataclass
class GRUParams:
    w_x: Tensor  # (d_in, 3H)
    w_h: Tensor  # (H, 3H)
    b_x: Tensor  # (3H,)
    b_h: Tensor  # (3H,)

    @property
    def hidden(self) -> int:
        return self.w_h.shape[0]

    @property
    def d_in(self) -> int:
        return self.w_x.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {"w_x": self.w_x, "w_h": self.w_h, "b_x": self.b_x, "b_h": self.b_h}

    def check(self) -> None:
        H = self.hidden
        if self.w_h.shape != (H, 3 * H) or self.w_x.shape[1:] != (3 * H,):
            raise DimensionError(f"GRU weight shapes {self.w_x.shape}, {self.w_h.shape} inconsistent")
        if self.b_x.shape != (3 * H,) or self.b_h.shape != (3 * H,):
            raise DimensionError("GRU bias shapes inconsistent with hidden size")

    @classmethod
    def init(cls, d_in: int, hidden: int, rng: np.random.Generator) -> "GRUParams":
        bound = 1.0 / np.sqrt(hidden)
        u = lambda *s: Tensor(rng.uniform(-bound, bound, size=s), requires_grad=True)
        return cls(u(d_in, 3 * hidden), u(hidden, 3 * hidden), u(3 * hidden), u(3 * hidden))

    @classmethod
    def zeros(cls, d_in: int, hidden: int) -> "GRUParams":
        z = lambda *s: Tensor(np.zeros(s), requires_grad=True)
        return cls(z(d_in, 3 * hidden), z(hidden, 3 * hidden), z(3 * hidden), z(3 * hidden))


def gru_cell(x, h, p: GRUParams) -> Tensor:
    """One GRU step; ``x`` is ``(..., d_in)`` and ``h`` is ``(..., H)``."""
    x, h = as_tensor(x), as_tensor(h)
    p.check()
    H = p.hidden
    if x.shape[-1] != p.d_in or h.shape[-1] != H:
        raise DimensionError(f"gru_cell: x {x.shape} / h {h.shape} do not match params (d_in={p.d_in}, H={H})")
    gx = x @ p.w_x + p.b_x
    gh = h @ p.w_h + p.b_h
    r = nd.sigmoid(gx[..., :H] + gh[..., :H])
    u = nd.sigmoid(gx[..., H:2 * H] + gh[..., H:2 * H])
    n = nd.tanh(gx[..., 2 * H:] + r * gh[..., 2 * H:])
    return (1.0 - u) * n + u * h


def _sig(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gru_sequence(x, p: GRUParams, h0=None, reverse: bool = False) -> Tensor:
    """Run a GRU over ``x`` of shape ``(B, T, d_in)``; returns all hidden states ``(B, T, H)``.

    With ``reverse=True`` the recurrence runs from ``t = T-1`` down to 0 and
    output ``[:, t]`` is the state after consuming ``x[:, t:]``.
    """
    x = as_tensor(x)
    p.check()
    if x.ndim != 3 or x.shape[-1] != p.d_in:
        raise DimensionError(f"gru_sequence: expected (B, T, {p.d_in}) input, got {x.shape}")
    B, T, _ = x.shape
    H = p.hidden
    Wx, Wh, bx, bh = p.w_x.data, p.w_h.data, p.b_x.data, p.b_h.data
    X = x.data[:, ::-1] if reverse else x.data
    if h0 is None:
        h0 = Tensor._wrap(np.zeros((B, H), dtype=X.dtype))
    else:
        h0 = as_tensor(h0)
        if h0.shape != (B, H):
            raise DimensionError(f"gru_sequence: h0 shape {h0.shape} != {(B, H)}")

    # buffers are time-major so every step touches contiguous memory
    Xt = np.ascontiguousarray(X.transpose(1, 0, 2))            # (T, B, d_in)
    GX = Xt @ Wx + bx                                          # (T, B, 3H)
    hs = np.empty((T + 1, B, H), dtype=X.dtype)
    RU = np.empty((T, B, 2 * H), dtype=X.dtype)
    N = np.empty((T, B, H), dtype=X.dtype)
    GHn = np.empty((T, B, H), dtype=X.dtype)
    hs[0] = h0.data
    h = hs[0]
    for t in range(T):
        gh = h @ Wh + bh
        gx = GX[t]
        rz = RU[t]
        np.add(gx[:, :2 * H], gh[:, :2 * H], out=rz)
        np.multiply(rz, 0.5, out=rz)
        np.tanh(rz, out=rz)
        rz += 1.0
        rz *= 0.5
        r = rz[:, :H]
        u = rz[:, H:]
        ghn = GHn[t]
        ghn[...] = gh[:, 2 * H:]
        n = N[t]
        np.multiply(r, ghn, out=n)
        n += gx[:, 2 * H:]
        np.tanh(n, out=n)
        h = hs[t + 1]
        np.subtract(hs[t], n, out=h)
        h *= u
        h += n
    out = hs[1:].transpose(1, 0, 2)
    if reverse:
        out = out[:, ::-1]
    out = np.ascontiguousarray(out)

    def bw(g, needs):
        G = g[:, ::-1] if reverse else g
        G = np.ascontiguousarray(G.transpose(1, 0, 2))          # (T, B, H)
        dGX = np.empty((T, B, 3 * H), dtype=X.dtype)
        dGH = np.empty((T, B, 3 * H), dtype=X.dtype)
        dh = np.zeros((B, H), dtype=X.dtype)
        WhT = np.ascontiguousarray(Wh.T)
        for t in range(T - 1, -1, -1):
            dh += G[t]
            ru, n, ghn = RU[t], N[t], GHn[t]
            r, u = ru[:, :H], ru[:, H:]
            hp = hs[t]
            dpre_n = dh * (1.0 - u) * (1.0 - n * n)
            dx = dGX[t]
            dx[:, :H] = dpre_n * ghn * r * (1.0 - r)
            dx[:, H:2 * H] = dh * (hp - n) * u * (1.0 - u)
            dx[:, 2 * H:] = dpre_n
            dg = dGH[t]
            dg[:, :2 * H] = dx[:, :2 * H]
            np.multiply(dpre_n, r, out=dg[:, 2 * H:])
            dh = dh * u + dg @ WhT
        grads = [None, None, None, None, None, None]
        if needs[0]:
            dX = (dGX @ Wx.T).transpose(1, 0, 2)
            grads[0] = np.ascontiguousarray(dX[:, ::-1] if reverse else dX)
        if needs[1]:
            grads[1] = Xt.reshape(-1, Xt.shape[-1]).T @ dGX.reshape(-1, 3 * H)
        if needs[2]:
            grads[2] = hs[:-1].reshape(-1, H).T @ dGH.reshape(-1, 3 * H)
        if needs[3]:
            grads[3] = dGX.sum(axis=(0, 1))
        if needs[4]:
            grads[4] = dGH.sum(axis=(0, 1))
        if needs[5]:
            grads[5] = dh
        return tuple(grads)

    return apply_op(out, (x, p.w_x, p.w_h, p.b_x, p.b_h, h0), bw, "gru_sequence")
