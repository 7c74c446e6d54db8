"""TopK sparse autoencoder and cluster-restricted reconstruction."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from beliefgeom import io
from beliefgeom.nn import AdamW, NumericalError, Parameter, Tensor, forward_backward, ops

log = logging.getLogger(__name__)

SAE_MAGIC = b"BGSA"
K_SWEEP = (3, 4, 5, 6, 7, 8, 10, 12, 14, 16, 19, 22, 25)


class SaeTrainingError(RuntimeError):
    def __init__(self, step: int, op: str | None = None):
        self.step = step
        super().__init__(f"SAE loss became non-finite at step {step}" + (f" (op {op})" if op else ""))


def topk_mask(pre: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k largest positive entries per row; ties go to the lower index."""
    order = np.argsort(-pre, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(pre.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask & (pre > 0)


@dataclass
class SaeModel:
    """Weights act on normalized inputs: ``(x_raw - mean) / scale``."""

    W_enc: np.ndarray  # (d_model, d_sae)
    b_enc: np.ndarray
    W_dec: np.ndarray  # (d_sae, d_model)
    b_dec: np.ndarray
    k: int
    mean: np.ndarray = None
    scale: float = 1.0

    def __post_init__(self):
        if self.mean is None:
            self.mean = np.zeros(self.d_model, dtype=self.W_enc.dtype)
        if not 1 <= self.k <= self.d_sae:
            raise ValueError(f"k={self.k} must lie in [1, d_sae={self.d_sae}]")

    @property
    def d_model(self) -> int:
        return self.W_enc.shape[0]

    @property
    def d_sae(self) -> int:
        return self.W_enc.shape[1]

    def normalize_input(self, x_raw: np.ndarray) -> np.ndarray:
        return (np.asarray(x_raw) - self.mean) / self.scale

    def preactivations(self, x: np.ndarray) -> np.ndarray:
        return (x - self.b_dec) @ self.W_enc + self.b_enc

    def encode(self, x: np.ndarray) -> np.ndarray:
        pre = self.preactivations(np.asarray(x, dtype=self.W_enc.dtype))
        return np.where(topk_mask(pre, self.k), pre, 0).astype(self.W_enc.dtype)

    def decode(self, f: np.ndarray) -> np.ndarray:
        return f @ self.W_dec + self.b_dec

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        return self.decode(self.encode(x))

    def cluster_contribution(self, f: np.ndarray, cluster: Sequence[int]) -> np.ndarray:
        """``f̃ @ W_dec`` with every latent outside ``cluster`` zeroed (no decoder bias)."""
        idx = np.asarray(list(cluster), dtype=np.int64)
        f = np.asarray(f)
        if idx.size == 0:
            return np.zeros(f.shape[:-1] + (self.d_model,), dtype=self.W_dec.dtype)
        if idx.min() < 0 or idx.max() >= self.d_sae:
            raise IndexError(f"cluster index out of range for d_sae={self.d_sae}")
        return f[..., idx] @ self.W_dec[idx]

    def relative_error(self, x: np.ndarray) -> float:
        """Squared reconstruction error over squared norm of the (normalized, centered) input."""
        err = self.reconstruct(x) - x
        return float((err * err).sum() / max((x * x).sum(), 1e-30))

    def normalize_decoder(self) -> "SaeModel":
        """Copy with unit-norm decoder rows; encoder columns and ``b_enc`` absorb the norms.

        Latent magnitudes scale by the row norms, so each latent's contribution
        to the reconstruction is unchanged whenever the TopK support is.
        """
        norms = np.linalg.norm(self.W_dec, axis=1)
        norms = np.where(norms > 0, norms, 1.0)
        return SaeModel(
            self.W_enc * norms,
            self.b_enc * norms,
            self.W_dec / norms[:, None],
            self.b_dec.copy(),
            self.k,
            self.mean.copy(),
            self.scale,
        )

    def unit_directions(self) -> np.ndarray:
        n = np.linalg.norm(self.W_dec, axis=1, keepdims=True)
        return self.W_dec / np.where(n > 0, n, 1.0)

    def save(self, path, info: dict | None = None) -> None:
        meta = {"d_model": self.d_model, "d_sae": self.d_sae, "k": self.k, "scale": self.scale}
        meta.update(info or {})
        io.write_container(
            path,
            SAE_MAGIC,
            {"W_enc": self.W_enc, "b_enc": self.b_enc, "W_dec": self.W_dec, "b_dec": self.b_dec, "mean": self.mean},
            meta,
        )

    @classmethod
    def load(cls, path) -> tuple["SaeModel", dict]:
        t, info = io.read_container(path, SAE_MAGIC)
        model = cls(t["W_enc"], t["b_enc"], t["W_dec"], t["b_dec"], int(info["k"]), t["mean"], float(info["scale"]))
        return model, info


@dataclass
class SaeConfig:
    d_sae: int = 256
    k: int = 8
    steps: int = 20_000
    batch: int = 256
    lr: float = 1e-3
    dead_window: int = 2000
    heldout_fraction: float = 0.1
    # "span": random directions inside the principal span of the data; "random": isotropic
    init: str = "span"


@dataclass
class SaeResult:
    model: SaeModel
    heldout_error: float
    train_error: float
    dead_fraction: float
    resampled: int
    losses: list[float] = field(default_factory=list)


def fit_normalizer(x: np.ndarray) -> tuple[np.ndarray, float]:
    """Mean and the scale that gives centered rows unit mean norm."""
    mean = x.mean(axis=0)
    scale = float(np.linalg.norm(x - mean, axis=1).mean())
    return mean, (scale if scale > 0 else 1.0)


def _init_directions(x: np.ndarray, cfg: SaeConfig, rng: np.random.Generator) -> np.ndarray:
    d = x.shape[1]
    if cfg.init == "random":
        dirs = rng.standard_normal((cfg.d_sae, d))
    elif cfg.init == "span":
        sample = x[rng.permutation(len(x))[:4096]].astype(np.float64)
        _, s, vt = np.linalg.svd(sample, full_matrices=False)
        e = s * s
        p = int(np.searchsorted(np.cumsum(e) / e.sum(), 0.999) + 1)
        dirs = (rng.standard_normal((cfg.d_sae, p)) * s[:p] / s[0]) @ vt[:p]
    else:
        raise ValueError(f"unknown SAE init {cfg.init!r}")
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs.astype(np.float32)


def train_sae(x_raw: np.ndarray, cfg: SaeConfig, seed: int) -> SaeResult:
    """Train a TopK SAE on rows of ``x_raw``.

    Inputs are centered and scaled to unit mean norm. Decoder rows are kept
    at unit norm after each step. Latents silent for ``cfg.dead_window``
    consecutive steps are re-seeded from the worst-reconstructed rows of the
    current batch.
    """
    x_raw = np.asarray(x_raw, dtype=np.float32)
    if cfg.k > cfg.d_sae:
        raise ValueError(f"k={cfg.k} exceeds d_sae={cfg.d_sae}")
    n, d = x_raw.shape
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_val = max(1, int(round(cfg.heldout_fraction * n))) if n > 1 else 0
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    if len(tr_idx) < cfg.batch:
        raise ValueError(f"need at least batch={cfg.batch} training rows, got {len(tr_idx)}")
    mean, scale = fit_normalizer(x_raw[tr_idx])
    x = ((x_raw - mean) / scale).astype(np.float32)
    xtr = x[tr_idx]

    dirs = _init_directions(xtr, cfg, rng)
    W_dec = Parameter(dirs, "W_dec")
    W_enc = Parameter(dirs.T.copy(), "W_enc")
    b_enc = Parameter(np.zeros(cfg.d_sae, np.float32), "b_enc")
    b_dec = Parameter(np.zeros(d, np.float32), "b_dec")
    params = [W_enc, b_enc, W_dec, b_dec]
    opt = AdamW(params, lr=cfg.lr)

    since_fired = np.zeros(cfg.d_sae, dtype=np.int64)
    resampled = 0
    losses = []
    for step in range(cfg.steps):
        xb = xtr[rng.integers(0, len(xtr), size=cfg.batch)]
        holder = {}

        def loss_fn():
            centered = ops.sub(Tensor(xb), b_dec)
            pre = ops.linear(centered, W_enc, b_enc)
            mask = topk_mask(pre.data, cfg.k)
            holder["mask"] = mask
            f = ops.mul(pre, mask.astype(np.float32))
            recon = ops.add(ops.matmul(f, W_dec), b_dec)
            holder["recon"] = recon.data
            # per-row squared error, averaged over the batch
            return ops.mul(ops.mse(recon, xb), float(d))

        try:
            loss = forward_backward(loss_fn, params)
        except NumericalError as exc:
            raise SaeTrainingError(step, exc.op) from exc
        opt.step()
        W_dec.data /= np.maximum(np.linalg.norm(W_dec.data, axis=1, keepdims=True), 1e-12)
        losses.append(loss)

        fired = holder["mask"].any(axis=0)
        since_fired = np.where(fired, 0, since_fired + 1)
        dead = np.flatnonzero(since_fired >= cfg.dead_window)
        if dead.size:
            err = ((holder["recon"] - xb) ** 2).sum(axis=1)
            p = err / err.sum() if err.sum() > 0 else None
            rows = rng.choice(cfg.batch, size=dead.size, replace=True, p=p)
            new = xb[rows] - holder["recon"][rows]
            new /= np.maximum(np.linalg.norm(new, axis=1, keepdims=True), 1e-12)
            W_dec.data[dead] = new
            W_enc.data[:, dead] = 0.2 * new.T
            b_enc.data[dead] = 0.0
            for prm, sl in ((W_dec, (dead,)), (W_enc, (slice(None), dead)), (b_enc, (dead,))):
                prm.m[sl] = 0.0
                prm.v[sl] = 0.0
            since_fired[dead] = 0
            resampled += dead.size
            log.info("sae step %d: resampled %d dead latents", step + 1, dead.size)

    model = SaeModel(W_enc.data.copy(), b_enc.data.copy(), W_dec.data.copy(), b_dec.data.copy(), cfg.k, mean, scale)
    xval = x[val_idx] if n_val else xtr
    fval = model.encode(xval)
    dead_frac = float((~(fval != 0).any(axis=0)).mean())
    return SaeResult(
        model,
        heldout_error=model.relative_error(xval),
        train_error=model.relative_error(xtr[: min(len(xtr), 4096)]),
        dead_fraction=dead_frac,
        resampled=resampled,
        losses=losses,
    )
