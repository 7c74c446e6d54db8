"""Toy decoder-only language model with residual capture and steering hooks."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from beliefgeom.nn import AdamW, NumericalError, Parameter, Tensor, forward_backward, init, no_grad, ops
from beliefgeom.nn.optim import clip_grad_norm, cosine_lr
from beliefgeom.processes import CompositeSpec, sample_batch

log = logging.getLogger(__name__)

STEER_MODES = ("type1", "type2", "type3")


class TrainingError(RuntimeError):
    def __init__(self, step: int, op: str | None = None):
        self.step = step
        super().__init__(f"loss diverged at step {step}" + (f" (op {op})" if op else ""))


@dataclass
class LmConfig:
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 3
    context_length: int = 16
    vocab: int = 432
    steps: int = 50_000
    batch: int = 64
    lr: float = 3e-4
    warmup: int = 200
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    eval_sequences: int = 2048

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ResidualCapture:
    layer: int
    vectors: np.ndarray  # (n_rows, d_model)
    seq_ids: np.ndarray
    positions: np.ndarray
    beliefs: list[np.ndarray] | None = None  # per component, (n_rows, n_states)


class Transformer:
    """Pre-norm decoder with learned positions and a 4x GELU MLP."""

    def __init__(self, cfg: LmConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.d_model
        p: dict[str, Parameter] = {}
        p["tok_emb"] = Parameter((rng.standard_normal((cfg.vocab, d)) * 0.02).astype(dtype), "tok_emb")
        p["pos_emb"] = Parameter((rng.standard_normal((cfg.context_length, d)) * 0.02).astype(dtype), "pos_emb")
        for i in range(cfg.n_layers):
            p[f"b{i}.ln1.g"] = init.ones((d,), dtype)
            p[f"b{i}.ln1.b"] = init.zeros((d,), dtype)
            p[f"b{i}.attn.w_qkv"] = init.fan_in_uniform(rng, (d, 3 * d), dtype)
            p[f"b{i}.attn.b_qkv"] = init.zeros((3 * d,), dtype)
            p[f"b{i}.attn.w_out"] = init.fan_in_uniform(rng, (d, d), dtype)
            p[f"b{i}.attn.b_out"] = init.zeros((d,), dtype)
            p[f"b{i}.ln2.g"] = init.ones((d,), dtype)
            p[f"b{i}.ln2.b"] = init.zeros((d,), dtype)
            p[f"b{i}.mlp.w_in"] = init.fan_in_uniform(rng, (d, 4 * d), dtype)
            p[f"b{i}.mlp.b_in"] = init.zeros((4 * d,), dtype)
            p[f"b{i}.mlp.w_out"] = init.fan_in_uniform(rng, (4 * d, d), dtype)
            p[f"b{i}.mlp.b_out"] = init.zeros((d,), dtype)
        p["ln_f.g"] = init.ones((d,), dtype)
        p["ln_f.b"] = init.zeros((d,), dtype)
        p["unembed.w"] = init.fan_in_uniform(rng, (d, cfg.vocab), dtype)
        p["unembed.b"] = init.zeros((cfg.vocab,), dtype)
        for name, param in p.items():
            param.name = name
        self.params = p

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def forward(
        self,
        tokens: np.ndarray,
        capture: Sequence[int] = (),
        patch: Callable[[int, Tensor], Tensor] | None = None,
    ) -> tuple[Tensor, dict[int, np.ndarray]]:
        """Logits (B, T, vocab) plus post-block residuals for layers in ``capture``.

        ``patch(layer, resid)`` may return a modified residual after each block.
        """
        tokens = np.atleast_2d(np.asarray(tokens))
        B, T = tokens.shape
        if T > self.cfg.context_length:
            raise ValueError(f"sequence length {T} exceeds context {self.cfg.context_length}")
        p = self.params
        x = ops.add(ops.embedding(p["tok_emb"], tokens), ops.embedding(p["pos_emb"], np.arange(T)))
        captured = {}
        for i in range(self.cfg.n_layers):
            h = ops.layernorm(x, p[f"b{i}.ln1.g"], p[f"b{i}.ln1.b"])
            qkv = ops.linear(h, p[f"b{i}.attn.w_qkv"], p[f"b{i}.attn.b_qkv"])
            a = ops.causal_attention(qkv, self.cfg.n_heads)
            x = ops.add(x, ops.linear(a, p[f"b{i}.attn.w_out"], p[f"b{i}.attn.b_out"]))
            h = ops.layernorm(x, p[f"b{i}.ln2.g"], p[f"b{i}.ln2.b"])
            h = ops.gelu(ops.linear(h, p[f"b{i}.mlp.w_in"], p[f"b{i}.mlp.b_in"]))
            x = ops.add(x, ops.linear(h, p[f"b{i}.mlp.w_out"], p[f"b{i}.mlp.b_out"]))
            if patch is not None:
                x = patch(i, x)
            if i in capture:
                captured[i] = x.data.copy()
        x = ops.layernorm(x, p["ln_f.g"], p["ln_f.b"])
        return ops.linear(x, p["unembed.w"], p["unembed.b"]), captured

    def logits(self, tokens: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.forward(tokens)[0].data

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, tensors: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(tensors)
        if missing:
            raise KeyError(f"checkpoint missing tensors: {sorted(missing)}")
        for k, v in tensors.items():
            if self.params[k].shape != v.shape:
                raise ValueError(f"tensor {k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=self.params[k].dtype)


def top1_accuracy(model: Transformer, tokens: np.ndarray, batch: int = 256) -> float:
    """Next-token top-1 accuracy over every position of (n_seq, T+1) sequences."""
    hits = total = 0
    for s in range(0, len(tokens), batch):
        chunk = tokens[s:s + batch]
        pred = model.logits(chunk[:, :-1]).argmax(axis=-1)
        hits += int((pred == chunk[:, 1:]).sum())
        total += pred.size
    return hits / total


@dataclass
class TrainResult:
    model: Transformer
    heldout_accuracy: float
    untrained_accuracy: float
    losses: list[float] = field(default_factory=list)
    seconds: float = 0.0


def train_lm(
    spec: CompositeSpec,
    cfg: LmConfig,
    seed: int,
    heldout: np.ndarray | None = None,
    data_rng: np.random.Generator | None = None,
    log_every: int = 500,
) -> TrainResult:
    """Train on freshly sampled sequences each step (AdamW, warmup + cosine decay)."""
    if cfg.vocab != spec.vocab_size:
        raise ValueError(f"config vocab {cfg.vocab} != process vocab {spec.vocab_size}")
    model = Transformer(cfg, seed=seed)
    rng = data_rng if data_rng is not None else np.random.default_rng(seed + 1)
    if heldout is None:
        heldout, _ = sample_batch(spec, cfg.eval_sequences, cfg.context_length + 1, np.random.default_rng(seed + 2))
    untrained = top1_accuracy(model, heldout)
    params = model.parameters()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    losses = []
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        seqs, _ = sample_batch(spec, cfg.batch, cfg.context_length + 1, rng)
        inp, tgt = seqs[:, :-1], seqs[:, 1:]
        try:
            loss = forward_backward(lambda: ops.cross_entropy(model.forward(inp)[0], tgt), params)
        except NumericalError as exc:
            raise TrainingError(step, exc.op) from exc
        if cfg.grad_clip:
            clip_grad_norm(params, cfg.grad_clip)
        opt.lr = cosine_lr(step, cfg.steps, cfg.lr, warmup=cfg.warmup, floor=0.1 * cfg.lr)
        opt.step()
        losses.append(loss)
        if log_every and (step + 1) % log_every == 0:
            log.info("lm step %d loss %.4f", step + 1, float(np.mean(losses[-log_every:])))
    acc = top1_accuracy(model, heldout)
    return TrainResult(model, acc, untrained, losses, time.perf_counter() - t0)


def capture_residual(model: Transformer, tokens: np.ndarray, layer: int, batch: int = 512) -> np.ndarray:
    """Post-block residual at ``layer`` for every (sequence, position); (n_seq*T, d_model)."""
    if not 0 <= layer < model.cfg.n_layers:
        raise ValueError(f"layer {layer} out of range for {model.cfg.n_layers} layers")
    tokens = np.atleast_2d(tokens)
    if tokens.size and tokens.max() >= model.cfg.vocab:
        raise ValueError("token id out of vocabulary")
    out = []
    with no_grad():
        for s in range(0, len(tokens), batch):
            _, cap = model.forward(tokens[s:s + batch], capture=(layer,))
            out.append(cap[layer].reshape(-1, model.cfg.d_model))
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.cfg.d_model), dtype=np.float32)


def capture_all(model: Transformer, tokens: np.ndarray, layers: Sequence[int], batch: int = 512):
    """Residuals for several layers plus next-token log-probs, one pass per batch."""
    tokens = np.atleast_2d(tokens)
    res = {layer: [] for layer in layers}
    logp = []
    with no_grad():
        for s in range(0, len(tokens), batch):
            logits, cap = model.forward(tokens[s:s + batch], capture=tuple(layers))
            for layer in layers:
                res[layer].append(cap[layer].reshape(-1, model.cfg.d_model))
            logp.append(ops.log_softmax_np(logits.data).reshape(-1, model.cfg.vocab).astype(np.float32))
    return {k: np.concatenate(v) for k, v in res.items()}, np.concatenate(logp)


def generate_steered(
    model: Transformer,
    prompt: Sequence[int],
    layer: int,
    delta: np.ndarray,
    scale: float,
    mode: str,
    length: int,
    k_sustain: int = 2,
) -> np.ndarray:
    """Greedy continuation of ``prompt`` with ``scale * delta`` added after block ``layer``.

    The last prompt position is the trigger and is always patched. ``type1``
    patches only the trigger, ``type2`` also the first ``k_sustain`` generated
    positions, ``type3`` every generated position. Recomputing the full prefix
    each step is equivalent to patching a KV cache since the model is causal.
    """
    if mode not in STEER_MODES:
        raise ValueError(f"unknown steering mode {mode!r}")
    if mode == "type2" and k_sustain < 1:
        raise ValueError("type2 steering needs k_sustain >= 1")
    delta = np.asarray(delta, dtype=np.float32)
    if delta.shape != (model.cfg.d_model,):
        raise ValueError(f"delta must have shape ({model.cfg.d_model},), got {delta.shape}")
    seq = [int(t) for t in prompt]
    trigger = len(seq) - 1
    if trigger < 0 or len(seq) + length - 1 > model.cfg.context_length:
        raise ValueError("prompt + continuation must fit in the context window")
    last = {"type1": trigger, "type2": trigger + k_sustain, "type3": len(seq) + length}[mode]
    vec = (scale * delta).astype(np.float32)

    def patch(i: int, x: Tensor) -> Tensor:
        if i != layer or scale == 0:
            return x
        T = x.shape[1]
        mask = np.zeros((T, 1), dtype=np.float32)
        mask[trigger:min(T, last + 1)] = 1.0
        return Tensor(x.data + mask * vec)

    out = []
    with no_grad():
        for _ in range(length):
            logits, _ = model.forward(np.array([seq]), patch=patch)
            nxt = int(np.argmax(logits.data[0, -1]))
            out.append(nxt)
            seq.append(nxt)
    return np.array(out, dtype=np.int64)
