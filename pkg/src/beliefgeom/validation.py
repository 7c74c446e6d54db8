"""Statistics that separate genuine belief simplices from tiling artifacts and noise."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import stats

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- sample splits

@dataclass
class SampleSplit:
    near_vertex: list[np.ndarray]
    interior: np.ndarray
    v_thresh: float
    i_thresh: float
    cap: int
    counts: list[int] = field(default_factory=list)  # pre-cap near-vertex counts
    empty_vertices: list[int] = field(default_factory=list)

    def near_rows(self) -> tuple[np.ndarray, np.ndarray]:
        """Pooled near-vertex rows and their vertex labels."""
        rows = [r for r in self.near_vertex if len(r)]
        if not rows:
            return np.zeros(0, np.int64), np.zeros(0, np.int64)
        labels = np.concatenate([np.full(len(r), k) for k, r in enumerate(self.near_vertex)])
        return np.concatenate(self.near_vertex), labels


def split_samples(
    bary: np.ndarray, v_thresh: float = 0.8, i_thresh: float = 0.6, cap: int = 200, seed: int = 0
) -> SampleSplit:
    """Near-vertex rows per vertex (max coordinate >= v_thresh) and interior rows (<= i_thresh).

    Both sets are subsampled without replacement, near-vertex to ``cap`` per
    vertex and interior to ``cap * K`` rows, and returned sorted.
    """
    bary = np.asarray(bary)
    if bary.ndim != 2:
        raise ValueError("bary must be (n, K)")
    if v_thresh <= i_thresh:
        raise ValueError("vertex threshold must exceed the interior threshold")
    n, K = bary.shape
    if n and (np.abs(bary.sum(axis=1) - 1).max() > 1e-6 or bary.min() < -1e-9):
        raise ValueError("rows must lie on the probability simplex")
    rng = np.random.default_rng(seed)
    mx = bary.max(axis=1) if n else np.zeros(0)
    arg = bary.argmax(axis=1) if n else np.zeros(0, np.int64)

    def sub(idx, m):
        if len(idx) <= m:
            return idx
        return np.sort(rng.choice(idx, size=m, replace=False))

    near, counts, empty = [], [], []
    for k in range(K):
        idx = np.flatnonzero((arg == k) & (mx >= v_thresh))
        counts.append(len(idx))
        if not len(idx):
            empty.append(k)
        near.append(sub(idx, cap))
    if empty:
        log.info("split: vertices %s have no near-vertex rows", empty)
    interior = sub(np.flatnonzero(mx <= i_thresh), cap * K)
    return SampleSplit(near, interior, v_thresh, i_thresh, cap, counts, empty)


# ---------------------------------------------------------------- Wilcoxon

@dataclass
class WilcoxonResult:
    p: float
    statistic: float
    n: int
    method: str
    all_zero: bool = False


def _exact_upper_tail(ranks: np.ndarray, w_obs: float) -> float:
    # ranks are multiples of 1/2 (mid-ranks), so work in doubled integer units
    r2 = np.rint(2 * ranks).astype(np.int64)
    counts = np.zeros(int(r2.sum()) + 1)
    counts[0] = 1.0
    for r in r2:
        counts[r:] = counts[r:] + counts[: len(counts) - r].copy()
    total = counts.sum()
    thr = int(np.rint(2 * w_obs))
    return float(counts[thr:].sum() / total)


def wilcoxon_one_sided(a: Sequence[float], b: Sequence[float], exact_max_n: int = 25) -> WilcoxonResult:
    """Paired signed-rank test of H1: ``a`` tends to exceed ``b``.

    Zero differences are dropped and ties get mid-ranks. The null distribution
    is enumerated exactly for n <= ``exact_max_n``; above that a normal
    approximation with tie-corrected variance and continuity correction is used.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("a and b must be 1-D and of equal length")
    if len(a) < 5:
        raise ValueError("need at least 5 pairs")
    d = a - b
    d = d[d != 0]
    n = len(d)
    if n == 0:
        return WilcoxonResult(1.0, 0.0, 0, "none", all_zero=True)
    ranks = stats.rankdata(np.abs(d))
    w = float(ranks[d > 0].sum())
    if n <= exact_max_n:
        p = _exact_upper_tail(ranks, w)
        method = "exact"
    else:
        mean = n * (n + 1) / 4.0
        _, t = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float((t**3 - t).sum()) / 48.0
        z = (w - mean - 0.5) / np.sqrt(var)
        p = float(stats.norm.sf(z))
        method = "normal"
    p = min(1.0, max(p, np.finfo(np.float64).tiny))
    return WilcoxonResult(p, w, n, method)


# ---------------------------------------------------------------- regression helpers

def make_folds(n: int, n_folds: int, seed: int, strata: np.ndarray | None = None) -> np.ndarray:
    """Fold id per row; rows are shuffled then dealt round-robin within each stratum."""
    rng = np.random.default_rng(seed)
    folds = np.empty(n, dtype=np.int64)
    strata = np.zeros(n, np.int64) if strata is None else np.asarray(strata)
    offset = 0
    for s in np.unique(strata):
        idx = rng.permutation(np.flatnonzero(strata == s))
        folds[idx] = (np.arange(len(idx)) + offset) % n_folds
        offset += len(idx)
    return folds


def cv_r2_multi(X: np.ndarray, Y: np.ndarray, folds: np.ndarray, ridge: float = 1e-6) -> np.ndarray:
    """Out-of-fold R² per column of Y for a ridge regression (with intercept) on all of X."""
    pred = np.empty_like(Y, dtype=np.float64)
    for f in np.unique(folds):
        tr, te = folds != f, folds == f
        xm, ym = X[tr].mean(axis=0), Y[tr].mean(axis=0)
        Xc = X[tr] - xm
        G = Xc.T @ Xc + ridge * np.eye(X.shape[1])
        beta = np.linalg.solve(G, Xc.T @ (Y[tr] - ym))
        pred[te] = ym + (X[te] - xm) @ beta
    ss_res = ((Y - pred) ** 2).sum(axis=0)
    ss_tot = ((Y - Y.mean(axis=0)) ** 2).sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        return 1.0 - ss_res / ss_tot


def cv_r2_univariate(X: np.ndarray, Y: np.ndarray, folds: np.ndarray, ridge: float = 1e-6) -> np.ndarray:
    """Out-of-fold R² of every single column of X against every column of Y: (m, T).

    The ridge is relative to each column's variance, so the result is exactly
    invariant to affine rescaling of a column.
    """
    n, m = X.shape
    T = Y.shape[1]
    pred = np.empty((n, m, T))
    for f in np.unique(folds):
        tr, te = folds != f, folds == f
        xm, ym = X[tr].mean(axis=0), Y[tr].mean(axis=0)
        Xc, Yc = X[tr] - xm, Y[tr] - ym
        sxx = (Xc * Xc).sum(axis=0)
        sxy = Xc.T @ Yc
        with np.errstate(divide="ignore", invalid="ignore"):
            beta = np.where(sxx[:, None] > 0, sxy / (sxx[:, None] * (1 + ridge)), 0.0)
        pred[te] = ym[None, None, :] + (X[te] - xm)[:, :, None] * beta[None]
    ss_res = ((Y[:, None, :] - pred) ** 2).sum(axis=0)
    ss_tot = ((Y - Y.mean(axis=0)) ** 2).sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        return 1.0 - ss_res / ss_tot[None, :]


# ---------------------------------------------------------------- barycentric advantage

@dataclass
class BaryAdvantageResult:
    tokens: np.ndarray
    r2_bary: np.ndarray
    r2_best_latent: np.ndarray
    frac_wins: float
    p: float
    n_rows: int
    skipped_tokens: list[int] = field(default_factory=list)


def bary_advantage(
    rows: np.ndarray,
    bary: np.ndarray,
    latents: np.ndarray,
    logprobs: np.ndarray,
    n_tokens: int = 50,
    n_folds: int = 5,
    ridge: float = 1e-6,
    seed: int = 0,
    strata: np.ndarray | None = None,
) -> BaryAdvantageResult:
    """Does the barycentric vector predict next-token log-probs better than any single latent?

    ``rows`` index the split; ``bary``, ``latents`` and ``logprobs`` are full
    row-aligned arrays. Tokens are the ``n_tokens`` with the largest
    log-prob variance over the split rows.
    """
    rows = np.asarray(rows)
    if len(rows) < 50:
        raise ValueError(f"bary_advantage needs at least 50 rows, got {len(rows)}")
    B = np.asarray(bary, dtype=np.float64)[rows]
    L = np.asarray(latents, dtype=np.float64)[rows]
    Y = np.asarray(logprobs, dtype=np.float64)[rows]
    var = Y.var(axis=0)
    order = np.argsort(-var, kind="stable")
    skipped = [int(t) for t in order[:n_tokens] if var[t] <= 0]
    if skipped:
        log.info("bary_advantage: skipping %d constant tokens", len(skipped))
    tokens = np.array([t for t in order[:n_tokens] if var[t] > 0], dtype=np.int64)
    if len(tokens) < n_tokens:
        warnings.warn(f"only {len(tokens)} usable tokens (wanted {n_tokens})", stacklevel=2)
    if len(tokens) < 5:
        raise ValueError("fewer than 5 non-constant tokens in the split")
    Yt = Y[:, tokens]
    folds = make_folds(len(rows), n_folds, seed, strata)
    r2_b = cv_r2_multi(B, Yt, folds, ridge)
    r2_l = cv_r2_univariate(L, Yt, folds, ridge).max(axis=0) if L.shape[1] else np.full(len(tokens), -np.inf)
    wins = float(np.mean(r2_b > r2_l))
    p = wilcoxon_one_sided(r2_b, r2_l).p
    return BaryAdvantageResult(tokens, r2_b, r2_l, wins, p, len(rows), skipped)


# ---------------------------------------------------------------- KL ratio

class UndefinedRatioError(ValueError):
    pass


def symmetric_kl(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    return ((p - q) * (np.log(p) - np.log(q))).sum(axis=-1)


def smooth(dists: np.ndarray, eps: float = 1e-9) -> np.ndarray:
    d = np.asarray(dists, dtype=np.float64) + eps
    return d / d.sum(axis=-1, keepdims=True)


@dataclass
class KlRatioResult:
    ratio: float
    cross_mean: float
    same_mean: float
    n_pairs: int


def kl_ratio(
    split: SampleSplit, dists: np.ndarray, n_pairs: int = 10_000, seed: int = 0, eps: float = 1e-9
) -> KlRatioResult:
    """Mean cross-vertex over mean same-vertex symmetric KL between next-token distributions.

    Pairs are drawn by picking a first row uniformly from the pooled
    near-vertex rows, then a partner uniformly among rows with the same
    (respectively a different) vertex label.
    """
    rows, labels = split.near_rows()
    populated = np.unique(labels)
    if len(populated) < 2:
        raise ValueError("kl_ratio needs at least 2 populated vertices")
    P = smooth(np.asarray(dists)[rows], eps)
    rng = np.random.default_rng(seed)
    groups = {k: np.flatnonzero(labels == k) for k in populated}
    eligible_same = np.concatenate([g for g in groups.values() if len(g) >= 2])
    if len(eligible_same) == 0:
        raise ValueError("no vertex has two rows for same-vertex pairs")

    def partner(i, same):
        if same:
            pool = groups[labels[i]]
            j = pool[rng.integers(len(pool) - 1)]
            return j if j != i else pool[-1]
        pool = np.flatnonzero(labels != labels[i])
        return pool[rng.integers(len(pool))]

    first_same = eligible_same[rng.integers(len(eligible_same), size=n_pairs)]
    js = np.array([partner(i, True) for i in first_same])
    same = symmetric_kl(P[first_same], P[js]).mean()
    first_cross = rng.integers(len(rows), size=n_pairs)
    jc = np.array([partner(i, False) for i in first_cross])
    cross = symmetric_kl(P[first_cross], P[jc]).mean()
    if same <= 0:
        raise UndefinedRatioError("mean same-vertex symmetric KL is zero; ratio undefined")
    return KlRatioResult(float(cross / same), float(cross), float(same), n_pairs)


# ---------------------------------------------------------------- ground-truth recovery

@dataclass
class RecoveryResult:
    r2: np.ndarray  # (clusters, components), NaN where skipped
    components: list[str]
    assignment: list[int | None]  # component index per cluster, None for noise
    best_r2: list[float]
    conflicts: dict[str, list[int]]
    noise_threshold: float

    def all_recovered(self) -> bool:
        claimed = {c for c in self.assignment if c is not None}
        return not self.conflicts and claimed == set(range(len(self.components)))

    def mean_assigned_r2(self) -> float:
        vals = [r for r, c in zip(self.best_r2, self.assignment) if c is not None]
        return float(np.mean(vals)) if vals else float("nan")


def heldout_r2(X: np.ndarray, Y: np.ndarray, train: np.ndarray, test: np.ndarray, ridge: float = 1e-6) -> float:
    """Pooled held-out R² of a ridge regression of all columns of Y on X."""
    Xtr, Ytr = X[train].astype(np.float64), Y[train].astype(np.float64)
    xm, ym = Xtr.mean(axis=0), Ytr.mean(axis=0)
    Xc = Xtr - xm
    beta = np.linalg.solve(Xc.T @ Xc + ridge * np.eye(X.shape[1]), Xc.T @ (Ytr - ym))
    pred = ym + (X[test] - xm) @ beta
    Yte = Y[test]
    ss_tot = ((Yte - Yte.mean(axis=0)) ** 2).sum(axis=0)
    keep = ss_tot > 1e-12 * (Yte**2).sum(axis=0)  # constant columns leave round-off only
    if not keep.any():
        return float("nan")
    ss_res = ((Yte - pred) ** 2).sum(axis=0)
    return float(1.0 - ss_res[keep].sum() / ss_tot[keep].sum())


def recovery_r2(
    signals: Sequence[np.ndarray],
    beliefs: Mapping[str, np.ndarray],
    train: np.ndarray,
    test: np.ndarray,
    noise_threshold: float = 0.1,
    ridge: float = 1e-6,
) -> RecoveryResult:
    """Held-out R² of each cluster's signal for each component's belief state.

    Each cluster is assigned to its best component unless its best R² falls
    below ``noise_threshold`` (then it is noise). Two non-noise clusters on
    one component are a conflict.
    """
    train, test = np.asarray(train), np.asarray(test)
    if np.intersect1d(train, test).size:
        raise ValueError("held-out rows overlap the fit rows")
    names = list(beliefs)
    R = np.full((len(signals), len(names)), np.nan)
    for i, S in enumerate(signals):
        S = np.asarray(S, dtype=np.float64)
        if S.ndim == 1:
            S = S[:, None]
        for j, name in enumerate(names):
            R[i, j] = heldout_r2(S, np.asarray(beliefs[name]), train, test, ridge)
    assignment, best = [], []
    for i in range(len(signals)):
        row = np.where(np.isnan(R[i]), -np.inf, R[i])
        j = int(row.argmax())
        best.append(float(row[j]))
        assignment.append(j if row[j] >= noise_threshold else None)
    conflicts = {}
    for j, name in enumerate(names):
        who = [i for i, c in enumerate(assignment) if c == j]
        if len(who) > 1:
            conflicts[name] = who
    return RecoveryResult(R, names, assignment, best, conflicts, noise_threshold)


# ---------------------------------------------------------------- steering

@dataclass
class SteeringResult:
    score: float
    control: float
    by_setting: dict[tuple[int, int, str, float], float]
    skipped_vertices: list[int]

    @property
    def advantage(self) -> float:
        return self.score - self.control


def steering_score(
    generate: Callable[[np.ndarray, np.ndarray, float, str], np.ndarray],
    continuation_belief: Callable[[np.ndarray, np.ndarray], np.ndarray],
    prompts: Sequence[Sequence[np.ndarray]],
    targets: np.ndarray,
    delta: Callable[[int, int], np.ndarray],
    scales: Sequence[float] = (1, 5, 20),
    modes: Sequence[str] = ("type1", "type2", "type3"),
) -> SteeringResult:
    """Mean strict-improvement rate of steered over unsteered continuations.

    ``prompts[v]`` lists prompt token arrays for source vertex v;
    ``generate(prompt, direction, scale, mode)`` returns a continuation;
    ``continuation_belief(prompt, continuation)`` is the oracle belief;
    ``targets[v]`` is vertex v's location in belief space and
    ``delta(v_from, v_to)`` the steering direction. A trial succeeds iff the
    steered belief is strictly closer (L2) to the target than the unsteered
    one. The control repeats everything at scale 0.
    """
    K = len(prompts)
    skipped = [v for v in range(K) if len(prompts[v]) == 0]
    live = [v for v in range(K) if v not in skipped]
    if len(live) < 2:
        raise ValueError("steering needs at least 2 vertices with prompts")
    by_setting: dict = {}
    base_cache: dict = {}
    for s in live:
        for t in live:
            if s == t:
                continue
            dvec = delta(s, t)
            for mode in modes:
                for scale in (0.0, *scales):
                    hits = []
                    for i, prompt in enumerate(prompts[s]):
                        key = (s, i)
                        if key not in base_cache:
                            cont0 = generate(prompt, dvec, 0.0, mode)
                            base_cache[key] = continuation_belief(prompt, cont0)
                        b0 = base_cache[key]
                        b1 = b0 if scale == 0 else continuation_belief(prompt, generate(prompt, dvec, scale, mode))
                        hits.append(np.linalg.norm(b1 - targets[t]) < np.linalg.norm(b0 - targets[t]))
                    by_setting[(s, t, mode, float(scale))] = float(np.mean(hits))
    steered = [v for k, v in by_setting.items() if k[3] != 0]
    control = [v for k, v in by_setting.items() if k[3] == 0]
    return SteeringResult(float(np.mean(steered)), float(np.mean(control)), by_setting, skipped)
