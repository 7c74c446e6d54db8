"""Simplex-fitting autoencoder (archetypal analysis) with a multi-K elbow sweep."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from beliefgeom import io
from beliefgeom.nn import AdamW, NumericalError, Parameter, Tensor, forward_backward, init, no_grad, ops

log = logging.getLogger(__name__)

AANET_MAGIC = b"BGAA"
DEFAULT_KS = (2, 3, 4, 5, 6, 7)


class FitError(RuntimeError):
    pass


class SweepError(RuntimeError):
    pass


@dataclass
class AanetConfig:
    hidden: tuple[int, int] = (256, 128)
    steps: int = 10_000
    lr: float = 1e-3
    batch: int = 256
    restarts: int = 5
    lambda_simplex: float = 1.0
    lambda_nonneg: float = 1.0
    # pulls each archetype toward its nearest training row (hull tightness)
    lambda_anchor: float = 0.1
    anchor_rows: int = 2048
    # asks the encoder to map each archetype back to its one-hot vertex
    lambda_cycle: float = 1.0
    weight_decay: float = 0.0
    val_fraction: float = 0.1
    eval_every: int = 250
    # keep principal directions up to this fraction of variance before fitting
    pca_energy: float = 0.9999

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Preprocessor:
    """Centers, projects onto the retained principal span and rescales to unit RMS."""

    mean: np.ndarray
    components: np.ndarray  # (d, p)
    scale: float

    @classmethod
    def fit(cls, X: np.ndarray, energy: float) -> "Preprocessor":
        mean = X.mean(axis=0)
        Xc = X - mean
        _, s, vt = np.linalg.svd(Xc, full_matrices=False)
        e = s * s
        if e.sum() <= 0:
            return cls(mean, np.eye(X.shape[1])[:, :1], 1.0)
        p = int(np.searchsorted(np.cumsum(e) / e.sum(), energy - 1e-12) + 1)
        comps = np.ascontiguousarray(vt[:p].T)  # same memory layout as after a reload
        z = Xc @ comps
        scale = float(np.sqrt((z * z).sum(axis=1).mean()))
        return cls(mean, comps, scale if scale > 0 else 1.0)

    def forward(self, X: np.ndarray) -> np.ndarray:
        return ((X - self.mean) @ self.components) / self.scale

    def inverse(self, Z: np.ndarray) -> np.ndarray:
        return Z * self.scale @ self.components.T + self.mean


class _Net:
    def __init__(self, p: int, K: int, hidden: Sequence[int], rng: np.random.Generator, dtype=np.float64):
        h1, h2 = hidden
        self.K = K
        f64 = dtype
        self.params = {
            "e1.w": init.fan_in_uniform(rng, (p, h1), f64), "e1.b": init.zeros((h1,), f64),
            "e2.w": init.fan_in_uniform(rng, (h1, h2), f64), "e2.b": init.zeros((h2,), f64),
            "e3.w": init.fan_in_uniform(rng, (h2, K - 1), f64), "e3.b": init.zeros((K - 1,), f64),
            "d1.w": init.fan_in_uniform(rng, (K, h2), f64), "d1.b": init.zeros((h2,), f64),
            "d2.w": init.fan_in_uniform(rng, (h2, h1), f64), "d2.b": init.zeros((h1,), f64),
            "d3.w": init.fan_in_uniform(rng, (h1, p), f64), "d3.b": init.zeros((p,), f64),
        }

    def encode(self, z: Tensor) -> Tensor:
        P = self.params
        h = ops.relu(ops.linear(z, P["e1.w"], P["e1.b"]))
        h = ops.relu(ops.linear(h, P["e2.w"], P["e2.b"]))
        if self.K == 1:
            return Tensor(np.ones(z.shape[:-1] + (1,)))
        return ops.softmax(ops.append_zero_logit(ops.linear(h, P["e3.w"], P["e3.b"])))

    def decode(self, a: Tensor) -> Tensor:
        P = self.params
        h = ops.relu(ops.linear(a, P["d1.w"], P["d1.b"]))
        h = ops.relu(ops.linear(h, P["d2.w"], P["d2.b"]))
        return ops.linear(h, P["d3.w"], P["d3.b"])

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in snap.items():
            self.params[k].data[...] = v.astype(self.params[k].data.dtype)


@dataclass
class SimplexFit:
    K: int
    weights: dict[str, np.ndarray]
    pre: Preprocessor
    restart_val_losses: list[float]
    chosen: int
    cfg: AanetConfig = field(default_factory=AanetConfig)

    def __post_init__(self):
        p = self.pre.components.shape[1]
        self._net = _Net(p, self.K, self.cfg.hidden, np.random.default_rng(0))
        self._net.restore(self.weights)

    @property
    def sweep_loss(self) -> float:
        """Mean best-checkpoint validation loss over the finite restarts."""
        v = [x for x in self.restart_val_losses if np.isfinite(x)]
        return float(np.mean(v))

    def barycentric(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        with no_grad():
            return self._net.encode(Tensor(self.pre.forward(X))).data

    def decode(self, A: np.ndarray) -> np.ndarray:
        A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        with no_grad():
            return self.pre.inverse(self._net.decode(Tensor(A)).data)

    def reconstruct(self, X: np.ndarray) -> np.ndarray:
        return self.decode(self.barycentric(X))

    def archetypes(self) -> np.ndarray:
        """Decoder images of the K one-hot barycentric points, (K, d)."""
        return self.decode(np.eye(self.K))

    def vertex_delta(self, v_from: int, v_to: int) -> np.ndarray:
        if v_from == v_to or not (0 <= v_from < self.K and 0 <= v_to < self.K):
            raise ValueError(f"need distinct vertices in [0, {self.K}), got {v_from}, {v_to}")
        arch = self.archetypes()
        return arch[v_to] - arch[v_from]

    def save(self, path, info: dict | None = None) -> None:
        tensors = {f"net/{k}": v for k, v in self.weights.items()}
        tensors.update({"pre/mean": self.pre.mean, "pre/components": self.pre.components,
                        "restart_val_losses": np.asarray(self.restart_val_losses, dtype=np.float64)})
        meta = {"K": self.K, "chosen": self.chosen, "pre_scale": self.pre.scale, "cfg": self.cfg.to_dict()}
        meta.update(info or {})
        io.write_container(path, AANET_MAGIC, tensors, meta)

    @classmethod
    def load(cls, path) -> "SimplexFit":
        t, info = io.read_container(path, AANET_MAGIC)
        cfgd = dict(info["cfg"])
        cfgd["hidden"] = tuple(cfgd["hidden"])
        weights = {k[4:]: v for k, v in t.items() if k.startswith("net/")}
        pre = Preprocessor(t["pre/mean"], t["pre/components"], float(info["pre_scale"]))
        return cls(int(info["K"]), weights, pre, list(t["restart_val_losses"]), int(info["chosen"]), AanetConfig(**cfgd))


def _penalties(a: np.ndarray, cfg: AanetConfig) -> float:
    # Both terms vanish identically under the softmax bottleneck (and so do their
    # gradients); they are evaluated for the logged loss only.
    simplex = cfg.lambda_simplex * float(np.mean(1.0 - np.abs(a).sum(axis=1)))
    nonneg = cfg.lambda_nonneg * float(np.mean((np.abs(a) * (a < 0)).sum(axis=1)))
    return simplex + nonneg


def _train_restart(Ztr, Zval, K, cfg: AanetConfig, seed: int):
    rng = np.random.default_rng(seed)
    # train in float32 for speed; SimplexFit evaluates the weights in float64
    Ztr, Zval = Ztr.astype(np.float32), Zval.astype(np.float32)
    net = _Net(Ztr.shape[1], K, cfg.hidden, rng, np.float32)
    params = list(net.params.values())
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    batch = min(cfg.batch, len(Ztr))
    best, best_snap = np.inf, net.snapshot()
    ref = Ztr[rng.permutation(len(Ztr))[: cfg.anchor_rows]]
    eye = Tensor(np.eye(K, dtype=np.float32))

    def loss_fn(zb):
        loss = ops.mse(net.decode(net.encode(Tensor(zb))), zb)
        if not (cfg.lambda_anchor or cfg.lambda_cycle):
            return loss
        arch = net.decode(eye)
        if cfg.lambda_anchor:
            d2 = ((arch.data[:, None, :] - ref[None, :, :]) ** 2).sum(axis=-1)
            nearest = ref[d2.argmin(axis=1)]
            loss = ops.add(loss, ops.mul(ops.mse(arch, nearest), cfg.lambda_anchor))
        if cfg.lambda_cycle:
            loss = ops.add(loss, ops.mul(ops.mse(net.encode(arch), eye.data), cfg.lambda_cycle))
        return loss

    def val_loss():
        with no_grad():
            rec = net.decode(net.encode(Tensor(Zval))).data
        return float(((rec - Zval) ** 2).sum(axis=1).mean())

    for step in range(cfg.steps):
        zb = Ztr[rng.integers(0, len(Ztr), size=batch)]
        try:
            forward_backward(lambda: loss_fn(zb), params)
        except NumericalError:
            return np.inf, None
        opt.step()
        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps:
            v = val_loss()
            if not np.isfinite(v):
                return np.inf, None
            if v < best:
                best, best_snap = v, net.snapshot()
    return best, best_snap


def fit_aanet(X: np.ndarray, K: int, cfg: AanetConfig | None = None, seed: int = 0) -> SimplexFit:
    """Fit ``cfg.restarts`` AANets with vertex count K and keep the lowest-validation one.

    Rows are split 90/10 (seed-fixed) into train and validation. Validation
    loss is the mean squared reconstruction error per row in the normalized
    coordinates, taken at the best checkpoint of each restart.
    """
    cfg = cfg or AanetConfig()
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if K < 2:
        raise ValueError("K must be at least 2")
    if n < 10 * K:
        raise ValueError(f"need at least {10 * K} rows for K={K}, got {n}")
    if d < K - 1:
        raise ValueError(f"data dimension {d} < K-1 = {K - 1}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_val = max(1, int(round(cfg.val_fraction * n)))
    pre = Preprocessor.fit(X[perm[n_val:]], cfg.pca_energy)
    Z = pre.forward(X)
    Zval, Ztr = Z[perm[:n_val]], Z[perm[n_val:]]
    seeds = np.random.SeedSequence([seed, K]).generate_state(cfg.restarts)
    losses, snaps = [], []
    for r in range(cfg.restarts):
        v, snap = _train_restart(Ztr, Zval, K, cfg, int(seeds[r]))
        if snap is None:
            log.warning("aanet K=%d restart %d failed (non-finite loss)", K, r)
        losses.append(v)
        snaps.append(snap)
    if all(s is None for s in snaps):
        raise FitError(f"all {cfg.restarts} restarts failed for K={K}")
    chosen = int(np.argmin(losses))
    fit = SimplexFit(K, snaps[chosen], pre, losses, chosen, cfg)
    assert all(losses[chosen] <= v for v in losses)
    return fit


@dataclass
class ElbowCurve:
    Ks: list[int]
    losses: list[float]
    k_star: int | None
    second_differences: dict[int, float] = field(default_factory=dict)
    failed: list[int] = field(default_factory=list)


def detect_elbow(Ks: Sequence[int], losses: Sequence[float], theta: float = 0.15):
    """Knee by the largest second difference of min-max normalized losses.

    Returns (K*, second differences by interior K). K* is None when the best
    second difference is below ``theta`` or would be K=2.
    """
    Ks = list(Ks)
    L = np.asarray(losses, dtype=np.float64)
    if len(L) < 3:
        raise ValueError("elbow detection needs at least 3 points")
    span = L.max() - L.min()
    if span <= 0:
        return None, {k: 0.0 for k in Ks[1:-1]}
    Ln = (L - L.min()) / span
    dd = {Ks[i]: float(Ln[i - 1] - 2 * Ln[i] + Ln[i + 1]) for i in range(1, len(L) - 1)}
    k_star = max(dd, key=lambda k: (dd[k], -k))
    if dd[k_star] < theta or k_star == 2:
        return None, dd
    return k_star, dd


def sweep_k(
    X: np.ndarray,
    Ks: Sequence[int] = DEFAULT_KS,
    cfg: AanetConfig | None = None,
    seed: int = 0,
    theta: float = 0.15,
) -> tuple[ElbowCurve, dict[int, SimplexFit]]:
    fits, ks, losses, failed = {}, [], [], []
    for K in Ks:
        try:
            fit = fit_aanet(X, K, cfg, seed)
        except (FitError, ValueError) as exc:
            log.warning("sweep: K=%d failed: %s", K, exc)
            failed.append(K)
            continue
        fits[K] = fit
        ks.append(K)
        losses.append(fit.sweep_loss)
    if len(ks) < 3:
        raise SweepError(f"only {len(ks)} valid K values in sweep (need 3)")
    k_star, dd = detect_elbow(ks, losses, theta)
    return ElbowCurve(ks, losses, k_star, dd, failed), fits
