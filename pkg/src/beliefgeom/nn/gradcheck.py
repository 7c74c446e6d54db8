from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from beliefgeom.nn.tensor import Tensor


def numerical_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Infinity-norm error relative to the larger of the two gradients."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-10)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check(loss_fn: Callable[[], Tensor], leaves: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Worst relative error between backprop and central differences over ``leaves``.

    ``loss_fn`` must rebuild the graph from the leaves' current ``data``.
    """
    for t in leaves:
        if t.data.dtype != np.float64:
            raise TypeError("gradient checks require float64 leaves")
        t.requires_grad = True
        t.grad = None
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    for t in leaves:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_grad(lambda: float(loss_fn().data), t.data, eps)
        worst = max(worst, max_relative_error(analytic, numeric))
    return worst


# Randomized cases per op: each builder draws shapes and values from ``rng``
# and returns (loss_fn, leaves). Losses contract outputs against a fixed random
# weighting so every output element contributes to the gradient.

def _leaf(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    from beliefgeom.nn import ops

    return ops.sum(ops.mul(out, w))


def _case_matmul(rng):
    from beliefgeom.nn import ops

    b, n, m = rng.integers(1, 5, size=3)
    a, w = _leaf(rng, 2, b, n), _leaf(rng, n, m)
    c = rng.standard_normal((2, b, m))
    return (lambda: _weighted(ops.matmul(a, w), c)), [a, w]


def _case_linear(rng):
    from beliefgeom.nn import ops

    b, n, m = rng.integers(1, 6, size=3)
    x, w, bias = _leaf(rng, b, n), _leaf(rng, n, m), _leaf(rng, m)
    c = rng.standard_normal((b, m))
    return (lambda: _weighted(ops.linear(x, w, bias), c)), [x, w, bias]


def _case_add(rng):
    from beliefgeom.nn import ops

    b, t, d = rng.integers(1, 5, size=3)
    x, p = _leaf(rng, b, t, d), _leaf(rng, t, d)
    c = rng.standard_normal((b, t, d))
    return (lambda: _weighted(ops.add(x, p), c)), [x, p]


def _case_sub(rng):
    from beliefgeom.nn import ops

    n, d = rng.integers(1, 6, size=2)
    x, y = _leaf(rng, n, d), _leaf(rng, d)
    c = rng.standard_normal((n, d))
    return (lambda: _weighted(ops.sub(x, y), c)), [x, y]


def _case_mul(rng):
    from beliefgeom.nn import ops

    n, d = rng.integers(1, 6, size=2)
    x, y = _leaf(rng, n, d), _leaf(rng, n, d)
    c = rng.standard_normal((n, d))
    return (lambda: _weighted(ops.mul(x, y), c)), [x, y]


def _case_square_mean(rng):
    from beliefgeom.nn import ops

    x = _leaf(rng, *rng.integers(1, 6, size=2))
    return (lambda: ops.mean(ops.square(x))), [x]


def _case_relu(rng):
    from beliefgeom.nn import ops

    n, d = rng.integers(1, 6, size=2)
    x = _leaf(rng, n, d)
    # keep inputs away from the kink so finite differences are well defined
    x.data[np.abs(x.data) < 1e-3] += 1e-2
    c = rng.standard_normal((n, d))
    return (lambda: _weighted(ops.relu(x), c)), [x]


def _case_gelu(rng):
    from beliefgeom.nn import ops

    n, d = rng.integers(1, 6, size=2)
    x = _leaf(rng, n, d, scale=2.0)
    c = rng.standard_normal((n, d))
    return (lambda: _weighted(ops.gelu(x), c)), [x]


def _case_softmax(rng):
    from beliefgeom.nn import ops

    n, d = rng.integers(1, 6, size=2)
    x = _leaf(rng, n, d + 1)
    c = rng.standard_normal((n, d + 1))
    return (lambda: _weighted(ops.softmax(x), c)), [x]


def _case_zero_logit_softmax(rng):
    from beliefgeom.nn import ops

    n, d = rng.integers(1, 6, size=2)
    x = _leaf(rng, n, d)
    c = rng.standard_normal((n, d + 1))
    return (lambda: _weighted(ops.softmax(ops.append_zero_logit(x)), c)), [x]


def _case_layernorm(rng):
    from beliefgeom.nn import ops

    b, t, d = rng.integers(1, 4, size=3)
    d = d + 1
    x = _leaf(rng, b, t, d)
    # near-constant rows make the op so curved that central differences stop
    # being a valid reference; redraw until every row has some spread
    while x.data.std(axis=-1).min() < 0.1:
        x = _leaf(rng, b, t, d)
    g, be = _leaf(rng, d), _leaf(rng, d)
    c = rng.standard_normal((b, t, d))
    return (lambda: _weighted(ops.layernorm(x, g, be), c)), [x, g, be]


def _case_attention(rng):
    from beliefgeom.nn import ops

    h = int(rng.integers(1, 3))
    dh = int(rng.integers(1, 4))
    b, t = rng.integers(1, 4, size=2)
    qkv = _leaf(rng, b, t, 3 * h * dh)
    c = rng.standard_normal((b, t, h * dh))
    return (lambda: _weighted(ops.causal_attention(qkv, h), c)), [qkv]


def _case_embedding(rng):
    from beliefgeom.nn import ops

    v, d = rng.integers(2, 7, size=2)
    table = _leaf(rng, v, d)
    ids = rng.integers(0, v, size=(2, 3))
    c = rng.standard_normal((2, 3, d))
    return (lambda: _weighted(ops.embedding(table, ids), c)), [table]


def _case_cross_entropy(rng):
    from beliefgeom.nn import ops

    n, v = rng.integers(1, 6, size=2)
    v = v + 1
    logits = _leaf(rng, n, v)
    t = rng.integers(0, v, size=n)
    return (lambda: ops.cross_entropy(logits, t)), [logits]


def _case_mse(rng):
    from beliefgeom.nn import ops

    n, d = rng.integers(1, 6, size=2)
    x = _leaf(rng, n, d)
    target = rng.standard_normal((n, d))
    return (lambda: ops.mse(x, target)), [x]


OP_CASES = {
    "matmul": _case_matmul,
    "linear": _case_linear,
    "add": _case_add,
    "sub": _case_sub,
    "mul": _case_mul,
    "square+mean": _case_square_mean,
    "relu": _case_relu,
    "gelu": _case_gelu,
    "softmax": _case_softmax,
    "append_zero_logit+softmax": _case_zero_logit_softmax,
    "layernorm": _case_layernorm,
    "causal_attention": _case_attention,
    "embedding": _case_embedding,
    "cross_entropy": _case_cross_entropy,
    "mse": _case_mse,
}


def run_op_suite(n_cases: int = 100, seed: int = 0, eps: float = 1e-5) -> dict[str, float]:
    """Worst relative error per op over ``n_cases`` random draws each."""
    rng = np.random.default_rng(seed)
    worst = {}
    for name, builder in OP_CASES.items():
        worst[name] = max(check(*builder(rng), eps=eps) for _ in range(n_cases))
    return worst
