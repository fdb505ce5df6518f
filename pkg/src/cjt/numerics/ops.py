"""Differentiable ops over :class:`Tensor`.

Broadcasting is limited to a trailing-shape operand combined with an operand
that carries extra leading (batch) dims, e.g. a bias of shape ``(d,)`` added
to activations of shape ``(B, T, d)``. Anything else must be reshaped first.
"""
from __future__ import annotations

import warnings
from typing import Optional, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, make_node


class AllPositionsExcludedWarning(UserWarning):
    """Every target position was excluded from a loss; the loss is 0."""


def _trailing_ok(big: tuple, small: tuple) -> bool:
    return len(small) <= len(big) and tuple(big[len(big) - len(small):]) == tuple(small)


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def _binary_shapes(op, a: Tensor, b: Tensor):
    if a.shape == b.shape:
        return
    if _trailing_ok(a.shape, b.shape) or _trailing_ok(b.shape, a.shape):
        return
    raise ShapeError(op, a.shape, b.shape, detail="only leading-dim broadcasting is allowed")


# ----------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)

    def backward(g):
        if a.requires_grad:
            a.accumulate(_reduce_to(g, a.shape))
        if b.requires_grad:
            b.accumulate(_reduce_to(g, b.shape))

    return make_node(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("sub", a, b)

    def backward(g):
        if a.requires_grad:
            a.accumulate(_reduce_to(g, a.shape))
        if b.requires_grad:
            b.accumulate(-_reduce_to(g, b.shape))

    return make_node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return scale(as_tensor(a), float(b))
    if not isinstance(a, Tensor) and np.isscalar(a):
        return scale(as_tensor(b), float(a))
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("mul", a, b)

    def backward(g):
        if a.requires_grad:
            a.accumulate(_reduce_to(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate(_reduce_to(g * a.data, b.shape))

    return make_node(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)

    def backward(g):
        a.accumulate(g * c)

    return make_node(a.data * c, (a,), backward, "scale")


def mask_const(a: Tensor, keep: np.ndarray) -> Tensor:
    """Multiply by a constant 0/1 array (leading-dim broadcast allowed on ``keep``)."""
    keep = np.asarray(keep, dtype=a.dtype)
    if keep.shape != a.shape and not _trailing_ok(a.shape, keep.shape):
        keep = np.broadcast_to(keep, a.shape) if keep.ndim == a.ndim else keep
        if keep.shape != a.shape:
            raise ShapeError("mask_const", a.shape, keep.shape)

    def backward(g):
        a.accumulate(g * keep)

    return make_node(a.data * keep, (a,), backward, "mask_const")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0

    def backward(g):
        a.accumulate(g * pos)

    return make_node(a.data * pos, (a,), backward, "relu")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def backward(g):
        a.accumulate(g * (1 - y * y))

    return make_node(y, (a,), backward, "tanh")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def backward(g):
        a.accumulate(g * y)

    return make_node(y, (a,), backward, "exp")


# ----------------------------------------------------------------- reductions
def sum_(a: Tensor) -> Tensor:
    def backward(g):
        a.accumulate(np.broadcast_to(g, a.shape).astype(a.dtype))

    return make_node(np.asarray(a.data.sum(), dtype=a.dtype), (a,), backward, "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def backward(g):
        a.accumulate(np.full(a.shape, g / n, dtype=a.dtype))

    return make_node(np.asarray(a.data.mean(), dtype=a.dtype), (a,), backward, "mean")


# ----------------------------------------------------------------- shape ops
def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        y = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError("reshape", a.shape, tuple(shape)) from exc

    def backward(g):
        a.accumulate(g.reshape(a.shape))

    return make_node(y, (a,), backward, "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, detail=f"bad axes {axes}")
    inv = tuple(np.argsort(axes))

    def backward(g):
        a.accumulate(g.transpose(inv))

    return make_node(a.data.transpose(axes), (a,), backward, "transpose")


def slice_(a: Tensor, idx) -> Tensor:
    y = a.data[idx]

    def backward(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        full[idx] = g
        a.accumulate(full)

    return make_node(np.array(y, dtype=a.dtype), (a,), backward, "slice")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError("concat", *[x.shape for x in tensors], detail=f"axis={axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * nd
                sl[ax] = slice(lo, hi)
                t.accumulate(g[tuple(sl)])

    return make_node(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


# ----------------------------------------------------------------- linear algebra
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a (..., m, k) @ b (k, n)`` or with identical leading dims on both."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="leading dims differ")
    y = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                b.accumulate(a.data.reshape(-1, k).T @ g.reshape(-1, n))
            else:
                b.accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return make_node(y, (a, b), backward, "matmul")


def _parse_einsum(spec: str):
    lhs, out = spec.replace(" ", "").split("->")
    ins = lhs.split(",")
    if len(ins) != 2:
        raise ValueError("einsum supports exactly two operands")
    return ins[0], ins[1], out


def einsum(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum; every index of an operand must appear in the other or the output."""
    a, b = as_tensor(a), as_tensor(b)
    ia, ib, io = _parse_einsum(spec)
    for own, other in ((ia, ib), (ib, ia)):
        if len(set(own)) != len(own) or any(c not in other and c not in io for c in own):
            raise ValueError(f"einsum spec {spec!r} not differentiable")
    try:
        y = np.einsum(spec, a.data, b.data, optimize=True)
    except ValueError as exc:
        raise ShapeError("einsum", a.shape, b.shape, detail=spec) from exc
    ga_spec = f"{io},{ib}->{ia}"
    gb_spec = f"{io},{ia}->{ib}"

    def backward(g):
        if a.requires_grad:
            a.accumulate(np.einsum(ga_spec, g, b.data, optimize=True))
        if b.requires_grad:
            b.accumulate(np.einsum(gb_spec, g, a.data, optimize=True))

    return make_node(np.asarray(y, dtype=a.dtype), (a, b), backward, "einsum")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    y = matmul(x, w)
    return add(y, b) if b is not None else y


# ----------------------------------------------------------------- normalisation
def softmax(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis; ``mask`` is an additive constant (e.g. -1e9 where disallowed)."""
    z = x.data if mask is None else x.data + mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    y = y.astype(x.dtype, copy=False)

    def backward(g):
        x.accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return make_node(y, (x,), backward, "softmax")


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = (z - lse).astype(x.dtype, copy=False)

    def backward(g):
        x.accumulate(g - np.exp(y) * g.sum(axis=-1, keepdims=True))

    return make_node(y, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    y = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            gamma.accumulate(_reduce_to(g * xhat, gamma.shape))
        if beta.requires_grad:
            beta.accumulate(_reduce_to(g, beta.shape))
        if x.requires_grad:
            gx = g * gamma.data
            gx = rstd * (gx - gx.mean(axis=-1, keepdims=True)
                         - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            x.accumulate(gx)

    return make_node(y.astype(x.dtype, copy=False), (x, gamma, beta), backward, "layer_norm")


# ----------------------------------------------------------------- lookup / conv
def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ShapeError("embedding", table.shape, ids.shape, detail="ids must be integers")
    if table.ndim != 2:
        raise ShapeError("embedding", table.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding", table.shape, ids.shape, detail="id out of range")

    def backward(g):
        gt = np.zeros(table.shape, dtype=table.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        table.accumulate(gt)

    return make_node(table.data[ids], (table,), backward, "embedding")


def conv1d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1,
           padding: tuple = (0, 0)) -> Tensor:
    """Channels-last 1-D convolution: ``x (B, T, Cin)``, ``w (K, Cin, Cout)``."""
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ShapeError("conv1d", x.shape, w.shape)
    B, T, cin = x.shape
    K, _, cout = w.shape
    lp, rp = padding
    xp = np.pad(x.data, ((0, 0), (lp, rp), (0, 0)))
    t_out = (T + lp + rp - K) // stride + 1
    if t_out <= 0:
        raise ShapeError("conv1d", x.shape, w.shape, detail="input shorter than kernel")
    span = stride * (t_out - 1) + 1
    cols = np.stack([xp[:, k:k + span:stride] for k in range(K)], axis=2)  # B,t_out,K,cin
    cols2 = cols.reshape(B * t_out, K * cin)
    w2 = w.data.reshape(K * cin, cout)
    y = (cols2 @ w2).reshape(B, t_out, cout)
    if b is not None:
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(B * t_out, cout)
        if w.requires_grad:
            w.accumulate((cols2.T @ g2).reshape(w.shape))
        if b is not None and b.requires_grad:
            b.accumulate(g2.sum(axis=0))
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(B, t_out, K, cin)
            gxp = np.zeros_like(xp)
            for k in range(K):
                gxp[:, k:k + span:stride] += gcols[:, :, k]
            x.accumulate(gxp[:, lp:lp + T])

    return make_node(y, parents, backward, "conv1d")


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: tuple = (1, 1),
           padding: tuple = (0, 0)) -> Tensor:
    """Channels-last 2-D convolution: ``x (B, H, W, Cin)``, ``w (kh, kw, Cin, Cout)``."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError("conv2d", x.shape, w.shape)
    B, H, W, cin = x.shape
    kh, kw, _, cout = w.shape
    sh, sw = stride
    ph, pw = padding
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    h_out = (H + 2 * ph - kh) // sh + 1
    w_out = (W + 2 * pw - kw) // sw + 1
    if h_out <= 0 or w_out <= 0:
        raise ShapeError("conv2d", x.shape, w.shape, detail="input smaller than kernel")
    hs, ws = sh * (h_out - 1) + 1, sw * (w_out - 1) + 1
    cols = np.stack([xp[:, i:i + hs:sh, j:j + ws:sw] for i in range(kh) for j in range(kw)],
                    axis=3)  # B,h_out,w_out,kh*kw,cin
    cols2 = cols.reshape(B * h_out * w_out, kh * kw * cin)
    w2 = w.data.reshape(kh * kw * cin, cout)
    y = (cols2 @ w2).reshape(B, h_out, w_out, cout)
    if b is not None:
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, cout)
        if w.requires_grad:
            w.accumulate((cols2.T @ g2).reshape(w.shape))
        if b is not None and b.requires_grad:
            b.accumulate(g2.sum(axis=0))
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(B, h_out, w_out, kh * kw, cin)
            gxp = np.zeros_like(xp)
            n = 0
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + hs:sh, j:j + ws:sw] += gcols[:, :, :, n]
                    n += 1
            x.accumulate(gxp[:, ph:ph + H, pw:pw + W])

    return make_node(y, parents, backward, "conv2d")


# ----------------------------------------------------------------- stochastic / gating
def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], train: bool) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    keep = (rng.random(x.shape, dtype=np.float32) >= rate).astype(x.dtype)
    keep *= x.dtype.type(1.0 / (1.0 - rate))

    def backward(g):
        x.accumulate(g * keep)

    return make_node(x.data * keep, (x,), backward, "dropout")


def grad_gate(x: Tensor, open: bool) -> Tensor:
    """Identity forward; backward passes the gradient through iff ``open``, else exact zeros."""

    def backward(g):
        x.accumulate(g if open else np.zeros_like(g))

    return make_node(x.data, (x,), backward, "grad_gate_open" if open else "grad_gate_closed")


# ----------------------------------------------------------------- losses
def _exclusion_mask(targets: np.ndarray, exclude) -> np.ndarray:
    if exclude is None:
        return np.zeros(targets.shape, dtype=bool)
    if isinstance(exclude, np.ndarray) and exclude.dtype == bool:
        if exclude.shape != targets.shape:
            raise ShapeError("smoothed_cross_entropy", targets.shape, exclude.shape)
        return exclude
    if targets.ndim != 1:
        raise ValueError("position-set exclusion needs 1-D targets; pass a boolean mask")
    mask = np.zeros(targets.shape, dtype=bool)
    for pos in exclude:
        if not 0 <= pos < targets.shape[0]:
            raise ValueError(f"excluded position {pos} outside [0, {targets.shape[0]})")
        mask[pos] = True
    return mask


def smoothed_cross_entropy(logits: Tensor, targets, smoothing: float = 0.0,
                           exclude=None) -> Tensor:
    """Mean over non-excluded positions of KL(smoothed one-hot || softmax(logits)).

    ``smoothing`` spreads mass uniformly over all ``V`` classes, so the target
    receives ``1 - smoothing + smoothing / V``. ``exclude`` is either a boolean
    array shaped like ``targets`` (True = skip) or, for 1-D targets, an
    iterable of positions.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must be in [0, 1), got {smoothing}")
    targets = np.asarray(targets)
    V = logits.shape[-1]
    if logits.shape[:-1] != targets.shape:
        raise ShapeError("smoothed_cross_entropy", logits.shape, targets.shape)
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise ValueError("target id outside vocabulary")
    excl = _exclusion_mask(targets, exclude)
    keep = ~excl
    n = int(keep.sum())
    dt = logits.dtype
    if n == 0:
        warnings.warn("all target positions excluded; loss defined as 0",
                      AllPositionsExcludedWarning, stacklevel=2)

        def backward_zero(g):
            logits.accumulate(np.zeros_like(logits.data))

        return make_node(np.asarray(0.0, dtype=dt), (logits,), backward_zero, "smoothed_ce")

    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    tgt_logp = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    eps = smoothing
    on = 1.0 - eps + eps / V
    off = eps / V
    per_pos = -(1.0 - eps) * tgt_logp - off * logp.sum(axis=-1)
    ent = on * np.log(on) + ((V - 1) * off * np.log(off) if off > 0 else 0.0)
    loss = float(((per_pos + ent) * keep).sum() / n)

    def backward(g):
        p = np.exp(logp)
        q = np.full(p.shape, off, dtype=p.dtype)
        np.put_along_axis(q, targets[..., None], on, axis=-1)
        grad = (p - q) * (keep[..., None] * (float(g) / n))
        logits.accumulate(grad.astype(dt, copy=False))

    return make_node(np.asarray(loss, dtype=dt), (logits,), backward, "smoothed_ce")
