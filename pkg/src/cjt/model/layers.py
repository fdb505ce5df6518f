"""Parameter initialisation and transformer building blocks."""
from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .. import numerics as nx
from ..numerics import Tensor

NEG_INF = -1e9
REL_CLIP = 64


class ParamInit:
    """Collects named parameter arrays with fan-in scaled uniform init."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.arrays: dict = {}

    def uniform(self, name, shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        self.arrays[name] = self.rng.uniform(-bound, bound, size=shape)

    def const(self, name, shape, value):
        self.arrays[name] = np.full(shape, float(value))

    def linear(self, name, d_in, d_out, bias=True):
        self.uniform(f"{name}.w", (d_in, d_out), d_in)
        if bias:
            self.const(f"{name}.b", (d_out,), 0.0)

    def norm(self, name, d):
        self.const(f"{name}.g", (d,), 1.0)
        self.const(f"{name}.b", (d,), 0.0)

    def attention(self, name, d, heads, relative):
        for part in ("q", "k", "v", "o"):
            self.linear(f"{name}.{part}", d, d)
        if relative:
            dh = d // heads
            # lookup tables behave like one-hot matmuls, i.e. fan-in 1
            self.uniform(f"{name}.rel_k", (2 * REL_CLIP + 1, dh), dh)
            self.uniform(f"{name}.rel_v", (2 * REL_CLIP + 1, dh), dh)

    def ffn(self, name, d, d_ff):
        self.linear(f"{name}.fc1", d, d_ff)
        self.linear(f"{name}.fc2", d_ff, d)


def relative_index(tq: int, tk: int, offset: int = 0) -> np.ndarray:
    """Clipped relative distance ``key - query`` shifted into ``[0, 2*clip]``."""
    q = np.arange(tq)[:, None] + offset
    k = np.arange(tk)[None, :]
    return np.clip(k - q, -REL_CLIP, REL_CLIP) + REL_CLIP


def sinusoid_positions(t: int, d: int) -> np.ndarray:
    """Fixed absolute position codes, ``(t, d)``."""
    pos = np.arange(t)[:, None]
    freq = np.exp(-math.log(10000.0) * (np.arange(0, d, 2) / d))
    out = np.zeros((t, d))
    out[:, 0::2] = np.sin(pos * freq)
    out[:, 1::2] = np.cos(pos * freq[: d // 2])
    return out


def causal_mask(t: int, dtype) -> np.ndarray:
    m = np.triu(np.ones((t, t), dtype=bool), k=1)
    return np.where(m, NEG_INF, 0.0).astype(dtype)


def key_mask(valid: np.ndarray, dtype) -> np.ndarray:
    """(B, Tk) bool -> additive (B, 1, 1, Tk)."""
    return np.where(valid, 0.0, NEG_INF).astype(dtype)[:, None, None, :]


def layer_norm(p: dict, name: str, x: Tensor) -> Tensor:
    return nx.layer_norm(x, p[f"{name}.g"], p[f"{name}.b"])


def dense(p: dict, name: str, x: Tensor) -> Tensor:
    return nx.linear(x, p[f"{name}.w"], p.get(f"{name}.b"))


def attention(p: dict, name: str, xq: Tensor, xkv: Tensor, heads: int,
              add_mask: Optional[np.ndarray], relative: bool) -> Tensor:
    """Multi-head attention, optionally with clipped relative-position terms on keys and values."""
    B, tq, d = xq.shape
    tk = xkv.shape[1]
    dh = d // heads

    def split(t, n):
        return t.reshape(B, n, heads, dh).transpose(0, 2, 1, 3)

    q = split(dense(p, f"{name}.q", xq), tq)
    k = split(dense(p, f"{name}.k", xkv), tk)
    v = split(dense(p, f"{name}.v", xkv), tk)
    scores = nx.matmul(q, k.transpose(0, 1, 3, 2))
    if relative:
        idx = relative_index(tq, tk)
        rk = nx.embedding(p[f"{name}.rel_k"], idx)
        # (tq, B*H, dh) @ (tq, dh, tk): one small matmul per query position
        qt = q.transpose(2, 0, 1, 3).reshape(tq, B * heads, dh)
        rel = nx.matmul(qt, rk.transpose(0, 2, 1)).reshape(tq, B, heads, tk)
        scores = scores + rel.transpose(1, 2, 0, 3)
    scores = nx.scale(scores, 1.0 / math.sqrt(dh))
    attn = nx.softmax(scores, add_mask)
    out = nx.matmul(attn, v)
    if relative:
        rv = nx.embedding(p[f"{name}.rel_v"], idx)
        at = attn.transpose(2, 0, 1, 3).reshape(tq, B * heads, tk)
        relv = nx.matmul(at, rv).reshape(tq, B, heads, dh)
        out = out + relv.transpose(1, 2, 0, 3)
    out = out.transpose(0, 2, 1, 3).reshape(B, tq, d)
    return dense(p, f"{name}.o", out)


def feed_forward(p: dict, name: str, x: Tensor, dropout: float, rng, train: bool) -> Tensor:
    h = nx.relu(dense(p, f"{name}.fc1", x))
    h = nx.dropout(h, dropout, rng, train)
    return dense(p, f"{name}.fc2", h)
