"""Differentiable ops.

Every op takes and returns :class:`Tensor` values. Broadcasting is limited to
what the three models need: a trailing-shape operand (bias, positional table)
added to a larger one, and scalar or constant-array multiplication.
"""

from __future__ import annotations

import math

import numpy as np

from beliefgeom.nn.tensor import ShapeError, Tensor, make

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def _check_trailing(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.data.ndim <= a.data.ndim and a.shape[a.data.ndim - b.data.ndim:] == b.shape:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform")


def add(a: Tensor, b: Tensor) -> Tensor:
    """``a + b`` where ``b`` has the shape of ``a`` or of its trailing axes."""
    a, b = as_tensor(a), as_tensor(b)
    _check_trailing(a, b, "add")

    def backward(g):
        return g, _reduce_to(g, b.shape)

    return make(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_trailing(a, b, "sub")

    def backward(g):
        return g, -_reduce_to(g, b.shape)

    return make(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product. ``b`` may be a Tensor of equal shape, a constant
    array of equal shape, or a Python scalar."""
    a = as_tensor(a)
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")

        def backward(g):
            return g * b.data, g * a.data

        return make(a.data * b.data, (a, b), backward, "mul")
    c = np.asarray(b, dtype=a.dtype)
    if c.ndim and c.shape != a.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {c.shape} differ")
    return make(a.data * c, (a,), lambda g: (g * c,), "mul")


def neg(a: Tensor) -> Tensor:
    return make(-a.data, (a,), lambda g: (-g,), "neg")


def square(a: Tensor) -> Tensor:
    return make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return make(
        np.asarray(a.data.mean()), (a,), lambda g: (np.full(a.shape, g / n, dtype=a.dtype),), "mean"
    )


def matmul(a: Tensor, w: Tensor) -> Tensor:
    """``a @ w`` with ``a`` of shape (..., n) and ``w`` of shape (n, m)."""
    if w.data.ndim != 2 or a.shape[-1] != w.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {w.shape}")

    def backward(g):
        ga = g @ w.data.T if a.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gw

    return make(a.data @ w.data, (a, w), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Fused ``x @ w + b``."""
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: {x.shape} @ {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} for output width {w.shape[1]}")
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data
    if b is not None:
        out += b.data
    out_shape = x.shape[:-1] + (w.shape[1],)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return make(out.reshape(out_shape), parents, backward, "linear")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    return make(out, (a,), lambda g: (g * (out > 0),), "relu")


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    t = x2 * 0.044715
    t += 1.0
    t *= x
    t *= _SQRT_2_OVER_PI
    np.tanh(t, out=t)
    out = t + 1.0
    out *= x
    out *= 0.5

    def backward(g):
        # d/dx = 0.5(1+t) + 0.5 x (1-t^2) c (1 + 3k x^2)
        d = x2 * (3 * 0.044715)
        d += 1.0
        d *= _SQRT_2_OVER_PI
        d *= x
        d *= 1.0 - t * t
        d += 1.0 + t
        d *= 0.5
        d *= g
        return (d,)

    return make(out.astype(a.dtype, copy=False), (a,), backward, "gelu")


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return make(p, (a,), backward, "softmax")


def append_zero_logit(a: Tensor) -> Tensor:
    """Extend the last axis with a constant 0 column (K-1 logits -> K logits)."""
    pad = np.zeros(a.shape[:-1] + (1,), dtype=a.dtype)
    return make(np.concatenate([a.data, pad], axis=-1), (a,), lambda g: (g[..., :-1],), "append_zero_logit")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm: affine params {gamma.shape}, {beta.shape} for width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return make(out.astype(x.dtype), (x, gamma, beta), backward, "layernorm")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; ``ids`` is an integer array of any shape."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ShapeError("embedding: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: id out of range for table of {table.shape[0]} rows")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return make(table.data[ids], (table,), backward, "embedding")


def causal_attention(qkv: Tensor, n_heads: int) -> Tensor:
    """Multi-head causal self-attention from fused projections.

    ``qkv`` has shape (B, T, 3*D) laid out as [q | k | v]; the result has
    shape (B, T, D) with heads concatenated.
    """
    if qkv.data.ndim != 3 or qkv.shape[-1] % (3 * n_heads):
        raise ShapeError(f"causal_attention: qkv {qkv.shape} with {n_heads} heads")
    B, T, D3 = qkv.shape
    D = D3 // 3
    dh = D // n_heads
    scale = 1.0 / math.sqrt(dh)

    def heads(m):
        return m.reshape(B, T, n_heads, dh).transpose(0, 2, 1, 3)

    q, k, v = (heads(qkv.data[..., i * D:(i + 1) * D]) for i in range(3))
    s = (q @ k.transpose(0, 1, 3, 2)) * scale
    mask = np.triu(np.ones((T, T), dtype=bool), k=1)
    s = np.where(mask, -np.inf, s)
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    o = p @ v
    out = o.transpose(0, 2, 1, 3).reshape(B, T, D)

    def backward(g):
        go = heads(g)
        gv = p.transpose(0, 1, 3, 2) @ go
        gp = go @ v.transpose(0, 1, 3, 2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        gq = gs @ k
        gk = gs.transpose(0, 1, 3, 2) @ q
        merged = [m.transpose(0, 2, 1, 3).reshape(B, T, D) for m in (gq, gk, gv)]
        return (np.concatenate(merged, axis=-1),)

    return make(out.astype(qkv.dtype), (qkv,), backward, "causal_attention")


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy; ``logits`` (..., V), integer ``targets`` (...)."""
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    V = logits.shape[-1]
    z = logits.data.reshape(-1, V)
    t = targets.reshape(-1)
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)) + zmax
    n = z.shape[0]
    loss = (lse[:, 0] - z[np.arange(n), t]).mean()

    def backward(g):
        p = np.exp(z - lse)
        p[np.arange(n), t] -= 1.0
        return ((g / n) * p.reshape(logits.shape),)

    return make(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


def mse(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error against a constant target."""
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: {pred.shape} vs {target.shape}")
    diff = pred.data - target
    n = diff.size
    return make(
        np.asarray((diff * diff).mean(), dtype=pred.dtype), (pred,), lambda g: (g * 2.0 * diff / n,), "mse"
    )


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    """Plain numpy log-softmax over the last axis (inference helper)."""
    zmax = z.max(axis=-1, keepdims=True)
    return z - zmax - np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True))
