"""Generative processes with exact belief filtering.

A process is a set of per-symbol linear operators ``T[y]`` acting on row
vectors. For an HMM, ``T[y][i, j] = P(next=j, emit=y | current=i)`` and the
belief is a probability vector. For the Bloch-walk GHMM the state vector holds
density-matrix coordinates in the Pauli basis ``(1, r_x, r_y, r_z)`` and the
probability of a symbol is read off with the evaluation vector ``normalizer``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ROW_TOL = 1e-12


class SpecError(ValueError):
    """Process parameters outside the valid construction range."""


class FilteringError(RuntimeError):
    """A symbol with zero probability under the current belief was observed."""

    def __init__(self, symbol: int, step: int | None = None):
        self.symbol = symbol
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"symbol {symbol} has zero probability under the current belief{where}")


@dataclass(frozen=True, eq=False)
class ProcessSpec:
    name: str
    transition_ops: np.ndarray  # (n_symbols, n_states, n_states)
    initial_belief: np.ndarray
    normalizer: np.ndarray
    kind: str = "hmm"  # "hmm" or "ghmm"

    def __post_init__(self):
        T = np.asarray(self.transition_ops, dtype=np.float64)
        object.__setattr__(self, "transition_ops", T)
        object.__setattr__(self, "initial_belief", np.asarray(self.initial_belief, dtype=np.float64))
        object.__setattr__(self, "normalizer", np.asarray(self.normalizer, dtype=np.float64))
        if T.ndim != 3 or T.shape[1] != T.shape[2]:
            raise SpecError(f"transition_ops must be (n_symbols, n, n), got {T.shape}")
        if self.initial_belief.shape != (T.shape[1],) or self.normalizer.shape != (T.shape[1],):
            raise SpecError("initial_belief / normalizer length must equal n_states")
        total = T.sum(axis=0)
        if self.kind == "hmm":
            if np.any(T < 0):
                raise SpecError(f"{self.name}: HMM operators must be non-negative")
            if not np.allclose(total.sum(axis=1), 1.0, atol=ROW_TOL, rtol=0):
                raise SpecError(f"{self.name}: sum_y T_y is not row-stochastic")
        elif not np.allclose(total @ self.normalizer, self.normalizer, atol=1e-10, rtol=0):
            raise SpecError(f"{self.name}: sum_y T_y does not preserve the normalizer")
        if abs(self.initial_belief @ self.normalizer - 1.0) > 1e-12:
            raise SpecError(f"{self.name}: initial belief is not normalized")

    @property
    def n_states(self) -> int:
        return self.transition_ops.shape[1]

    @property
    def n_symbols(self) -> int:
        return self.transition_ops.shape[0]

    @property
    def emission_matrix(self) -> np.ndarray:
        """(n_states, n_symbols): ``b @ emission_matrix`` is the next-symbol law."""
        return (self.transition_ops @ self.normalizer).T

    def predictive(self, beliefs: np.ndarray) -> np.ndarray:
        return np.asarray(beliefs) @ self.emission_matrix


def mess3_spec(x: float, a: float, name: str = "mess3") -> ProcessSpec:
    """Three-state Mess3 HMM.

    ``x`` is the probability of hopping to each of the two other states
    (self-transition ``1 - 2x``); ``a`` is the probability that the emitted
    token equals the destination state, the remaining ``1 - a`` split evenly
    over the other two tokens.
    """
    if not (0 < x < 0.5) or not (0 < a < 1):
        raise SpecError(f"Mess3 needs 0 < x < 0.5 and 0 < a < 1, got x={x}, a={a}")
    A = np.full((3, 3), x)
    np.fill_diagonal(A, 1 - 2 * x)
    E = np.full((3, 3), (1 - a) / 2)
    np.fill_diagonal(E, a)
    T = np.stack([A * E[None, :, y] for y in range(3)])
    return ProcessSpec(name, T, np.full(3, 1 / 3), np.ones(3), kind="hmm")


_PAULI = (
    np.eye(2, dtype=complex),
    np.array([[0, 1], [1, 0]], dtype=complex),
    np.array([[0, -1j], [1j, 0]], dtype=complex),
    np.array([[1, 0], [0, -1]], dtype=complex),
)


def _superoperator(K: np.ndarray) -> np.ndarray:
    """Real 4x4 matrix of rho -> K rho K^dag in Pauli coordinates (row convention)."""
    T = np.empty((4, 4))
    for i, Pi in enumerate(_PAULI):
        out = K @ Pi @ K.conj().T
        for j, Pj in enumerate(_PAULI):
            T[i, j] = 0.5 * np.trace(Pj @ out).real
    return T


def tom_quantum_spec(alpha: float, beta: float, name: str = "tom_quantum") -> ProcessSpec:
    """Bloch-walk GHMM on a qubit with four measurement tokens.

    Each step measures the qubit along x or z (fair choice of basis, tokens
    ``x+, x-, z+, z-``) with sharpness ``eta = sin^2(beta / 2)``, i.e. POVM
    elements ``(I +/- eta * sigma) / 4``, then rotates the post-measurement
    state by angle ``alpha`` about the y axis. Pure states stay pure, so the
    generator's state is a unit vector on the sphere; the observer starts from
    the maximally mixed (stationary) state.
    """
    if not (np.isfinite(alpha) and np.isfinite(beta)) or not (0 < beta <= np.pi):
        raise SpecError(f"Bloch walk needs finite alpha and 0 < beta <= pi, got ({alpha}, {beta})")
    eta = np.sin(beta / 2) ** 2
    I, X, _, Z = _PAULI
    half = alpha / 2
    U = np.cos(half) * I - 1j * np.sin(half) * _PAULI[2]
    lp, lm = np.sqrt((1 + eta) / 4), np.sqrt((1 - eta) / 4)
    ops = []
    for axis in (X, -X, Z, -Z):
        sqrt_e = 0.5 * (lp + lm) * I + 0.5 * (lp - lm) * axis
        ops.append(_superoperator(U @ sqrt_e))
    T = np.stack(ops)
    T[np.abs(T) < 1e-15] = 0.0
    tau = np.array([1.0, 0.0, 0.0, 0.0])
    return ProcessSpec(name, T, tau.copy(), tau, kind="ghmm")


def _normalize(b: np.ndarray, spec: ProcessSpec) -> np.ndarray:
    if spec.kind == "hmm":
        b = np.where(b < 0, 0.0, b)
        return b / b.sum(axis=-1, keepdims=True)
    return b / (b @ spec.normalizer)[..., None]


def belief_update(spec: ProcessSpec, b: np.ndarray, y: int, step: int | None = None) -> np.ndarray:
    """Bayes filter step: ``b T_y / (b T_y tau)``."""
    if not 0 <= y < spec.n_symbols:
        raise ValueError(f"symbol {y} out of range for {spec.n_symbols} symbols")
    nb = np.asarray(b, dtype=np.float64) @ spec.transition_ops[y]
    z = nb @ spec.normalizer
    if not z > 0:
        raise FilteringError(y, step)
    nb = nb / z
    if spec.kind == "hmm":
        if np.any(nb < -1e-12):
            raise FilteringError(y, step)
        nb = _normalize(nb, spec)
    return nb


def filter_beliefs(spec: ProcessSpec, symbols: Sequence[int]) -> np.ndarray:
    """Beliefs after each observed symbol, shape (len(symbols), n_states)."""
    b = spec.initial_belief
    out = np.empty((len(symbols), spec.n_states))
    for t, y in enumerate(symbols):
        b = belief_update(spec, b, int(y), step=t)
        out[t] = b
    return out


@dataclass(frozen=True, eq=False)
class CompositeSpec:
    """Independent components emitting jointly; most-significant component first."""

    components: tuple[ProcessSpec, ...]
    radices: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise SpecError("composite needs at least one component")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "radices", tuple(c.n_symbols for c in comps))

    @property
    def vocab_size(self) -> int:
        return int(np.prod(self.radices))

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.components]

    def encode(self, symbols: np.ndarray) -> np.ndarray:
        """Per-component symbols (..., n_components) -> joint token ids (...)."""
        symbols = np.asarray(symbols)
        tok = np.zeros(symbols.shape[:-1], dtype=np.int64)
        for c, r in enumerate(self.radices):
            tok = tok * r + symbols[..., c]
        return tok

    def decode(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        out = np.empty(tokens.shape + (len(self.radices),), dtype=np.int64)
        rest = tokens.copy()
        for c in range(len(self.radices) - 1, -1, -1):
            out[..., c] = rest % self.radices[c]
            rest //= self.radices[c]
        return out

    def joint_predictive(self, beliefs: Sequence[np.ndarray]) -> np.ndarray:
        """Next-token law over the joint vocabulary from per-component beliefs.

        ``beliefs[c]`` has shape (..., n_states_c); the result (..., vocab).
        """
        p = None
        for spec, b in zip(self.components, beliefs):
            pc = np.clip(spec.predictive(b), 0.0, None)
            p = pc if p is None else (p[..., :, None] * pc[..., None, :]).reshape(p.shape[:-1] + (-1,))
        return p


def compose(components: Sequence[ProcessSpec]) -> CompositeSpec:
    return CompositeSpec(tuple(components))


PAPER_MESS3 = ((0.05, 0.85), (0.075, 0.90), (0.10, 0.95))
PAPER_TOM_QUANTUM = ((1.51, 3.07), (1.99, 2.51))


def paper_composite() -> CompositeSpec:
    """The five-component, 432-token multipartite process."""
    comps = [
        tom_quantum_spec(*PAPER_TOM_QUANTUM[0], name="tom_quantum"),
        tom_quantum_spec(*PAPER_TOM_QUANTUM[1], name="tom_quantum_1"),
        mess3_spec(*PAPER_MESS3[0], name="mess3"),
        mess3_spec(*PAPER_MESS3[1], name="mess3_1"),
        mess3_spec(*PAPER_MESS3[2], name="mess3_2"),
    ]
    return compose(comps)


def composite_from_config(components: Sequence[dict]) -> CompositeSpec:
    """Build from config entries like ``{"kind": "mess3", "x": .05, "a": .85, "name": ...}``."""
    built = []
    for entry in components:
        kind = entry["kind"]
        if kind == "mess3":
            built.append(mess3_spec(entry["x"], entry["a"], name=entry.get("name", "mess3")))
        elif kind == "tom_quantum":
            built.append(tom_quantum_spec(entry["alpha"], entry["beta"], name=entry.get("name", "tom_quantum")))
        else:
            raise SpecError(f"unknown process kind {kind!r}")
    return compose(built)


def sample_batch(
    spec: CompositeSpec, n_seq: int, length: int, rng: np.random.Generator
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Sample ``n_seq`` independent paths from the stationary start.

    Returns joint tokens (n_seq, length) and, per component, the exact filter
    beliefs (n_seq, length, n_states) after observing each token.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    n_comp = len(spec.components)
    symbols = np.empty((n_seq, length, n_comp), dtype=np.int64)
    beliefs = [np.empty((n_seq, length, c.n_states)) for c in spec.components]
    state = [np.tile(c.initial_belief, (n_seq, 1)) for c in spec.components]
    for t in range(length):
        u = rng.random((n_seq, n_comp))
        for c, comp in enumerate(spec.components):
            p = np.clip(state[c] @ comp.emission_matrix, 0.0, None)
            cdf = np.cumsum(p, axis=1)
            cdf /= cdf[:, -1:]
            y = np.minimum((u[:, c:c + 1] > cdf).sum(axis=1), comp.n_symbols - 1)
            nb = np.einsum("ni,nij->nj", state[c], comp.transition_ops[y])
            state[c] = _normalize(nb, comp)
            symbols[:, t, c] = y
            beliefs[c][:, t] = state[c]
    return spec.encode(symbols), beliefs


def sample_path(spec: CompositeSpec, length: int, seed: int) -> tuple[np.ndarray, list[np.ndarray]]:
    """One path: tokens (length,) and per-component beliefs (length, n_states)."""
    tokens, beliefs = sample_batch(spec, 1, length, np.random.default_rng(seed))
    return tokens[0], [b[0] for b in beliefs]


def filter_tokens(spec: CompositeSpec, tokens: np.ndarray) -> list[np.ndarray]:
    """Exact per-component beliefs for joint token sequences (n_seq, length)."""
    tokens = np.atleast_2d(tokens)
    symbols = spec.decode(tokens)
    out = []
    for c, comp in enumerate(spec.components):
        b = np.tile(comp.initial_belief, (tokens.shape[0], 1))
        seq = np.empty(tokens.shape + (comp.n_states,))
        for t in range(tokens.shape[1]):
            y = symbols[:, t, c]
            nb = np.einsum("ni,nij->nj", b, comp.transition_ops[y])
            z = nb @ comp.normalizer
            if np.any(z <= 0):
                raise FilteringError(int(y[np.argmax(z <= 0)]), t)
            b = _normalize(nb, comp)
            seq[:, t] = b
        out.append(seq)
    return out


def belief_targets(spec: ProcessSpec, beliefs: np.ndarray) -> np.ndarray:
    """Regression targets for a component's beliefs (drops constant coordinates).

    HMM beliefs are used as-is; for the Bloch walk the constant trace and the
    always-zero y coordinate are dropped, leaving the (r_x, r_z) disk.
    """
    if spec.kind == "hmm":
        return beliefs
    return beliefs[..., [1, 3]]


def disk_projection(beliefs: np.ndarray) -> np.ndarray:
    """2-D PCA projection of filter states (plot coordinates for GHMM geometry)."""
    X = beliefs.reshape(-1, beliefs.shape[-1])
    Xc = X - X.mean(axis=0)
    _, _, vt = np.linalg.svd(Xc, full_matrices=False)
    return Xc @ vt[:2].T
