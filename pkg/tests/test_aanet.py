import itertools

import numpy as np
import pytest

from beliefgeom.aanet import AanetConfig, FitError, SimplexFit, SweepError, detect_elbow, fit_aanet, sweep_k

FAST = AanetConfig(steps=1500, restarts=2, eval_every=100)


def simplex_data(rng, n=3000, d=16, K=3, edge=1.8):
    V = rng.standard_normal((K, d))
    V *= edge / np.sqrt(2) / np.linalg.norm(V, axis=1, keepdims=True)  # near-orthogonal vertices
    A = rng.dirichlet(np.ones(K), size=n)
    return A @ V, A, V


def aligned(perm_src, truth):
    """Best permutation of rows of ``perm_src`` matching ``truth`` (by total L2 error)."""
    K = len(truth)
    best = min(itertools.permutations(range(K)), key=lambda p: np.linalg.norm(perm_src[list(p)] - truth, axis=1).sum())
    return list(best)


@pytest.fixture(scope="module")
def clean_fit():
    rng = np.random.default_rng(0)
    X, A, V = simplex_data(rng)
    return X, A, V, fit_aanet(X, 3, AanetConfig(steps=4000, restarts=2, eval_every=250), seed=1)


def test_clean_simplex_vertices_recovered(clean_fit):
    X, _, V, fit = clean_fit
    assert np.linalg.norm(V[0] - V[1]) >= 1.0
    arch = fit.archetypes()
    p = aligned(arch, V)
    err = np.linalg.norm(arch[p] - V, axis=1)
    assert err.max() < 0.1, err


def test_archetype_encodes_to_its_vertex(clean_fit):
    _, _, _, fit = clean_fit
    bary = fit.barycentric(fit.archetypes())
    assert np.all(bary.max(axis=1) >= 0.9)
    assert sorted(bary.argmax(axis=1).tolist()) == [0, 1, 2]


def test_barycentric_is_on_simplex_for_any_input(clean_fit):
    _, _, _, fit = clean_fit
    Z = np.random.default_rng(5).standard_normal((10_000, 16)) * 5
    B = fit.barycentric(Z)
    assert np.all(B >= 0)
    np.testing.assert_allclose(B.sum(axis=1), 1.0, atol=1e-6)


def test_vertex_delta_antisymmetry(clean_fit):
    fit = clean_fit[3]
    np.testing.assert_allclose(fit.vertex_delta(0, 2), -fit.vertex_delta(2, 0), atol=1e-12)
    np.testing.assert_allclose(fit.vertex_delta(0, 1), fit.archetypes()[1] - fit.archetypes()[0])
    with pytest.raises(ValueError):
        fit.vertex_delta(1, 1)
    with pytest.raises(ValueError):
        fit.vertex_delta(0, 3)


def test_chosen_restart_has_minimal_validation_loss(clean_fit):
    fit = clean_fit[3]
    assert fit.restart_val_losses[fit.chosen] == min(fit.restart_val_losses)
    assert fit.sweep_loss == pytest.approx(np.mean(fit.restart_val_losses))


def test_warped_simplex_barycentrics_correlate():
    rng = np.random.default_rng(2)
    K, d, n = 3, 16, 3000
    A = rng.dirichlet(np.ones(K), size=n)
    V = rng.standard_normal((K, d))
    V *= 1.5 / np.linalg.norm(V, axis=1, keepdims=True)
    Y = A @ V
    M = rng.standard_normal((d, d)) / np.sqrt(d)
    X = Y + 0.3 * np.tanh(Y @ M)  # smooth, invertible for this scale
    fit = fit_aanet(X, K, AanetConfig(steps=3000, restarts=2, eval_every=250), seed=3)
    B = fit.barycentric(X)
    C = np.corrcoef(B.T, A.T)[:K, K:]
    best = max(itertools.permutations(range(K)), key=lambda p: sum(C[p[j], j] for j in range(K)))
    r = [C[best[j], j] for j in range(K)]
    assert min(r) >= 0.8, r


def test_repeated_point_collapses():
    X = np.tile(np.linspace(-1, 1, 8), (200, 1))
    fit = fit_aanet(X, 3, AanetConfig(steps=600, restarts=1, eval_every=100), seed=0)
    np.testing.assert_allclose(fit.archetypes(), X[:3], atol=1e-3)
    assert max(fit.restart_val_losses) < 1e-6


def test_contract_errors():
    X = np.random.default_rng(0).standard_normal((25, 4))
    with pytest.raises(ValueError):
        fit_aanet(X, 3, FAST)
    with pytest.raises(ValueError):
        fit_aanet(np.zeros((100, 2)), 5, FAST)
    with pytest.raises(ValueError):
        fit_aanet(np.zeros((100, 4)), 1, FAST)


def test_all_restarts_failing_raises():
    X = np.random.default_rng(0).standard_normal((100, 4))
    with pytest.raises(FitError):
        fit_aanet(X, 3, AanetConfig(steps=20, restarts=2, lr=1e38, eval_every=10))


def test_fit_is_deterministic():
    X = np.random.default_rng(1).standard_normal((200, 5))
    cfg = AanetConfig(steps=50, restarts=2, eval_every=25)
    a, b = fit_aanet(X, 3, cfg, seed=4), fit_aanet(X, 3, cfg, seed=4)
    assert a.archetypes().tobytes() == b.archetypes().tobytes()


def test_save_load_roundtrip(tmp_path, clean_fit):
    fit = clean_fit[3]
    fit.save(tmp_path / "fit.bin", {"cluster": 4})
    back = SimplexFit.load(tmp_path / "fit.bin")
    assert back.K == 3 and back.chosen == fit.chosen
    X = clean_fit[0][:100]
    assert back.barycentric(X).tobytes() == fit.barycentric(X).tobytes()


def test_elbow_rule_examples():
    k, dd = detect_elbow(range(2, 8), [1.0, 0.10, 0.07, 0.05, 0.05, 0.05])
    assert k == 3
    # normalized losses (1, .05/.95, .02/.95, 0, 0, 0)
    assert dd[3] == pytest.approx(1 - 0.08 / 0.95, abs=1e-12)
    # sharp knee at 4 on a convex curve
    assert detect_elbow(range(2, 8), [1.0, 0.8, 0.1, 0.08, 0.07, 0.06])[0] == 4
    assert detect_elbow(range(2, 8), [6.0, 5.0, 4.0, 3.0, 2.0, 1.0])[0] is None
    assert detect_elbow(range(2, 8), [0.3] * 6)[0] is None
    with pytest.raises(ValueError):
        detect_elbow([2, 3], [1.0, 0.5])


def test_elbow_never_picks_two_or_weak_knee():
    # largest second difference at K=2 is mapped to "none"
    assert detect_elbow([1, 2, 3, 4], [1.0, 0.1, 0.05, 0.0])[0] is None
    assert detect_elbow(range(2, 8), [1.0, 0.9, 0.75, 0.62, 0.5, 0.4], theta=0.15)[0] is None


def test_sweep_finds_triangle_elbow():
    rng = np.random.default_rng(6)
    X, _, _ = simplex_data(rng, n=2000, d=8)
    curve, fits = sweep_k(X, (2, 3, 4, 5), FAST, seed=0)
    assert curve.k_star == 3, curve
    assert set(fits) == {2, 3, 4, 5}
    assert len(curve.losses) == 4


def test_sweep_needs_three_valid_points():
    X = np.random.default_rng(0).standard_normal((35, 3))
    with pytest.raises(SweepError):
        sweep_k(X, (2, 3, 4, 5), AanetConfig(steps=10, restarts=1, eval_every=5))
