"""k-subspace clustering of decoder directions, rank screening and null clusters."""

from __future__ import annotations

import csv
import io as _io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg

from beliefgeom import io

log = logging.getLogger(__name__)

BASIS_MAGIC = b"BGCB"
UNASSIGNED = -1


class SeedingError(ValueError):
    def __init__(self, requested: int, achievable: int):
        self.requested = requested
        self.achievable = achievable
        super().__init__(f"cannot seed {requested} clusters: direction matrix has rank {achievable}")


@dataclass
class ClusterSet:
    assignments: np.ndarray  # per row, cluster id or UNASSIGNED
    bases: list[np.ndarray]  # (d, r_c) orthonormal columns
    ranks: np.ndarray
    objective_trace: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False

    @property
    def K(self) -> int:
        return len(self.bases)

    def members(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == c)

    def sizes(self) -> np.ndarray:
        return np.array([len(self.members(c)) for c in range(self.K)], dtype=np.int64)

    def save(self, csv_path, basis_path) -> None:
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["latent_id", "cluster_id"])
        for i, c in enumerate(self.assignments):
            w.writerow([i, int(c)])
        io.atomic_write_text(csv_path, buf.getvalue())
        tensors = {f"basis/{c}": b for c, b in enumerate(self.bases)}
        tensors["ranks"] = self.ranks.astype(np.int64)
        io.write_container(
            basis_path, BASIS_MAGIC, tensors,
            {"K": self.K, "iterations": self.iterations, "converged": self.converged,
             "objective_trace": [float(v) for v in self.objective_trace]},
        )

    @classmethod
    def load(cls, csv_path, basis_path) -> "ClusterSet":
        with open(csv_path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assign = np.full(len(rows), UNASSIGNED, dtype=np.int64)
        for r in rows:
            assign[int(r["latent_id"])] = int(r["cluster_id"])
        t, info = io.read_container(basis_path, BASIS_MAGIC)
        bases = [t[f"basis/{c}"] for c in range(int(info["K"]))]
        return cls(assign, bases, t["ranks"], info.get("objective_trace", []),
                   int(info.get("iterations", 0)), bool(info.get("converged", False)))


def _affinity(W: np.ndarray, K: int) -> np.ndarray:
    """Thresholded cosine affinity: each row keeps its q = ceil(n / 4K) nearest rows by |cos|.

    Weights are exp(-2 arccos|cos|) on the kept pairs, symmetrized and
    degree-normalized. Two rows of one subspace can be nearly orthogonal
    while rows of different subspaces are not, so the dense affinity is
    noisy; nearest neighbours almost always share a subspace.
    """
    n = W.shape[0]
    U = W / np.maximum(np.linalg.norm(W, axis=1, keepdims=True), 1e-300)
    C = np.abs(U @ U.T)
    np.fill_diagonal(C, -1.0)
    q = min(n - 1, max(3, -(-n // (4 * K))))
    idx = np.argsort(-C, axis=1, kind="stable")[:, :q]
    rows = np.arange(n)[:, None]
    A = np.zeros_like(C)
    A[rows, idx] = np.exp(-2.0 * np.arccos(np.clip(C[rows, idx], 0.0, 1.0)))
    A = A + A.T
    d = np.sqrt(np.maximum(A.sum(axis=1), 1e-300))
    return A / np.outer(d, d)


def _spectral_cpqr(W: np.ndarray, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-K eigenvectors of the subspace affinity and the K CPQR pivots of their transpose."""
    W = np.asarray(W, dtype=np.float64)
    n = W.shape[0]
    if K > n:
        raise ValueError(f"K={K} exceeds the number of directions {n}")
    rank = int(np.linalg.matrix_rank(W))
    if rank < K:
        raise SeedingError(K, rank)
    _, V = scipy.linalg.eigh(_affinity(W, K), subset_by_index=(n - K, n - 1))
    V = V[:, ::-1]
    _, _, piv = scipy.linalg.qr(V.T, mode="economic", pivoting=True)
    return V, piv[:K]


def cpqr_seed(W: np.ndarray, K: int) -> np.ndarray:
    """Row indices of K seed directions from column-pivoted QR.

    The QR runs on the transpose of the top-K eigenvectors of a
    nearest-neighbour subspace affinity. Rows sharing a subspace have similar
    embeddings, so the greedy pivots spread across subspaces rather than
    along one of them.
    """
    return _spectral_cpqr(W, K)[1]


def cpqr_partition(W: np.ndarray, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Initial labels and pivots: each row joins the pivot whose rotated embedding axis it loads on most."""
    V, piv = _spectral_cpqr(W, K)
    # orthogonal polar factor of the pivot block rotates the embedding onto near-indicator axes
    u, _, vt = np.linalg.svd(V[piv].T)
    return np.abs(V @ (u @ vt)).argmax(axis=1), piv


def _residuals(W: np.ndarray, sqnorm: np.ndarray, bases: Sequence[np.ndarray]) -> np.ndarray:
    out = np.empty((W.shape[0], len(bases)))
    for c, B in enumerate(bases):
        proj = W @ B
        out[:, c] = sqnorm - (proj * proj).sum(axis=1)
    return np.maximum(out, 0.0)


def _fit_basis(members: np.ndarray, r_max: int) -> np.ndarray:
    u, s, _ = np.linalg.svd(members.T, full_matrices=False)
    r = max(1, min(r_max, int((s > 1e-12 * max(s[0], 1e-300)).sum())))
    return u[:, :r]


def k_subspace(
    W: np.ndarray,
    K: int,
    r_max: int = 3,
    max_iters: int = 100,
    seed: int = 0,
    init: str = "cpqr",
    tau: float = 0.9,
) -> ClusterSet:
    """Alternate nearest-subspace assignment and rank-``r_max`` SVD refits.

    With ``init="cpqr"`` the first bases are fitted to the spectral CPQR
    partition; ``init="random"`` starts from lines through random rows.

    Rows with norm below 1e-8 are left unassigned. Assignment ties go to the
    lower cluster id. An emptied cluster is re-seeded from the row with the
    largest residual to its own subspace.
    """
    if r_max < 1:
        raise ValueError("r_max must be >= 1")
    W = np.asarray(W, dtype=np.float64)
    norms = np.linalg.norm(W, axis=1)
    live = np.flatnonzero(norms >= 1e-8)
    if len(live) < W.shape[0]:
        log.info("k_subspace: dropping %d near-zero rows", W.shape[0] - len(live))
    Wl = W[live]
    sq = (Wl * Wl).sum(axis=1)
    if init == "cpqr":
        start, piv = cpqr_partition(Wl, K)
        bases = [_fit_basis(Wl[start == c], r_max) if (start == c).any() else Wl[i][:, None] / np.sqrt(sq[i])
                 for c, i in enumerate(piv)]
    elif init == "random":
        if K > len(Wl):
            raise ValueError(f"K={K} exceeds the number of directions {len(Wl)}")
        seeds = np.random.default_rng(seed).choice(len(Wl), size=K, replace=False)
        bases = [(Wl[i] / np.linalg.norm(Wl[i]))[:, None] for i in seeds]
    else:
        raise ValueError(f"unknown init {init!r}")

    trace: list[float] = []
    assign = None
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        R = _residuals(Wl, sq, bases)
        new = R.argmin(axis=1)
        trace.append(float(R[np.arange(len(Wl)), new].sum()))
        if assign is not None and np.array_equal(new, assign):
            converged = True
            break
        assign = new
        for c in range(K):
            if not (assign == c).any():
                own = R[np.arange(len(Wl)), assign]
                worst = int(own.argmax())
                log.info("k_subspace: cluster %d empty, reseeding from row %d", c, live[worst])
                assign[worst] = c
                R[worst] = 0.0
        bases = [_fit_basis(Wl[assign == c], r_max) for c in range(K)]
    else:
        R = _residuals(Wl, sq, bases)
        assign = R.argmin(axis=1)
        trace.append(float(R[np.arange(len(Wl)), assign].sum()))

    full = np.full(W.shape[0], UNASSIGNED, dtype=np.int64)
    full[live] = assign
    ranks = np.array([estimate_rank(Wl[assign == c], tau) if (assign == c).any() else 0 for c in range(K)])
    return ClusterSet(full, bases, ranks, trace, it, converged)


def estimate_rank(members: np.ndarray, tau: float = 0.9) -> int:
    """Smallest r whose top-r singular values hold at least ``tau`` of the squared energy."""
    members = np.atleast_2d(np.asarray(members, dtype=np.float64))
    if members.shape[0] == 0:
        raise ValueError("estimate_rank needs at least one member")
    s = np.linalg.svd(members, compute_uv=False)
    energy = s * s
    total = energy.sum()
    if total <= 0:
        return 0
    frac = np.cumsum(energy) / total
    return int(np.searchsorted(frac, tau - 1e-12) + 1)


@dataclass(frozen=True)
class RankScreen:
    """Keep clusters whose estimated rank lies in [rank_min, rank_max] (no upper bound when None)."""

    rank_min: int = 3
    rank_max: int | None = None
    tau: float = 0.9

    def passes(self, rank: int) -> bool:
        return self.rank_min <= rank and (self.rank_max is None or rank <= self.rank_max)


@dataclass
class NullClusters:
    clusters: list[np.ndarray]
    ranks: list[int]
    attempted: int
    retained: int
    diagnostic: str = ""


def screen_clusters(cs: ClusterSet, screen: RankScreen) -> list[int]:
    return [c for c in range(cs.K) if screen.passes(int(cs.ranks[c]))]


def make_null_clusters(
    W: np.ndarray,
    sizes: Sequence[int],
    screen: RankScreen,
    seed: int,
    n_partitions: int = 1,
) -> NullClusters:
    """Random partitions of the latents into groups with the given sizes, screened like real clusters.

    Each partition draws one group per entry of ``sizes`` from a fresh
    permutation, so the null size multiset matches the real one exactly.
    """
    W = np.asarray(W, dtype=np.float64)
    sizes = [int(s) for s in sizes]
    if sum(sizes) > W.shape[0]:
        raise ValueError(f"sizes sum to {sum(sizes)} but only {W.shape[0]} latents exist")
    rng = np.random.default_rng(seed)
    kept, ranks = [], []
    attempted = 0
    for _ in range(n_partitions):
        perm = rng.permutation(W.shape[0])
        start = 0
        for s in sizes:
            group = np.sort(perm[start:start + s])
            start += s
            attempted += 1
            if s == 0:
                continue
            r = estimate_rank(W[group], screen.tau)
            if screen.passes(r):
                kept.append(group)
                ranks.append(r)
    diag = ""
    if not kept:
        diag = f"no null cluster passed the rank screen in {attempted} attempts"
        log.warning(diag)
    return NullClusters(kept, ranks, attempted, len(kept), diag)


def load_cluster_files(directory) -> ClusterSet:
    d = Path(directory)
    return ClusterSet.load(d / "clusters.csv", d / "bases.bin")
