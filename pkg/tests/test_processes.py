import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beliefgeom.processes import (
    FilteringError,
    ProcessSpec,
    SpecError,
    belief_update,
    compose,
    composite_from_config,
    disk_projection,
    filter_beliefs,
    filter_tokens,
    mess3_spec,
    paper_composite,
    sample_batch,
    sample_path,
    tom_quantum_spec,
)


def test_paper_mess3_instances_are_valid():
    for x, a in ((0.05, 0.85), (0.075, 0.90), (0.10, 0.95)):
        s = mess3_spec(x, a)
        assert (s.n_states, s.n_symbols) == (3, 3)
        np.testing.assert_allclose(s.transition_ops.sum(axis=0).sum(axis=1), 1.0, atol=1e-12)
        assert np.all(s.transition_ops >= 0)


@pytest.mark.parametrize("x,a", [(0.0, 0.5), (0.5, 0.5), (0.1, 0.0), (0.1, 1.0), (-1, 0.5)])
def test_mess3_rejects_out_of_range(x, a):
    with pytest.raises(SpecError):
        mess3_spec(x, a)


def test_mess3_vanishing_hop_gives_identity_transitions():
    s = mess3_spec(1e-9, 0.85)
    np.testing.assert_allclose(s.transition_ops.sum(axis=0), np.eye(3), atol=1e-8)


def test_mess3_stationary_belief_is_uniform():
    s = mess3_spec(0.10, 0.95)
    u = np.full(3, 1 / 3)
    np.testing.assert_allclose(u @ s.transition_ops.sum(axis=0), u, atol=1e-15)


def test_belief_update_matches_joint_enumeration():
    s = mess3_spec(0.05, 0.85)
    b0 = np.array([1.0, 0.0, 0.0])
    for y1, y2 in itertools.product(range(3), repeat=2):
        # brute-force P(s2, y1, y2 | s0 = 0)
        joint = np.zeros(3)
        for s1, s2 in itertools.product(range(3), repeat=2):
            p_emit1 = s.transition_ops[y1][0, s1]
            p_emit2 = s.transition_ops[y2][s1, s2]
            joint[s2] += p_emit1 * p_emit2
        expected = joint / joint.sum()
        b = belief_update(s, belief_update(s, b0, y1), y2)
        np.testing.assert_allclose(b, expected, atol=1e-14)


def test_uniform_belief_is_fixed_point_under_uniform_emissions():
    s = mess3_spec(0.2, 1 / 3)
    u = np.full(3, 1 / 3)
    for y in range(3):
        np.testing.assert_allclose(belief_update(s, u, y), u, atol=1e-15)


def test_impossible_symbol_raises_with_symbol_and_step():
    T = np.zeros((2, 2, 2))
    T[0] = np.eye(2)  # symbol 1 never emitted
    spec = ProcessSpec("sticky", T, np.array([0.5, 0.5]), np.ones(2))
    with pytest.raises(FilteringError) as exc:
        filter_beliefs(spec, [0, 0, 1])
    assert exc.value.symbol == 1 and exc.value.step == 2


def test_symbol_out_of_range():
    with pytest.raises(ValueError):
        belief_update(mess3_spec(0.1, 0.9), np.full(3, 1 / 3), 3)


def test_invalid_hmm_spec_rejected():
    T = np.full((2, 2, 2), 0.3)
    with pytest.raises(SpecError):
        ProcessSpec("bad", T, np.array([0.5, 0.5]), np.ones(2))


@pytest.mark.parametrize("alpha,beta", [(1.51, 3.07), (1.99, 2.51)])
def test_tom_quantum_paper_instances_emit_valid_laws(alpha, beta):
    s = tom_quantum_spec(alpha, beta)
    assert s.n_symbols == 4
    tokens, beliefs = sample_path(compose([s]), 10_000, seed=5)
    b = np.vstack([s.initial_belief[None], beliefs[0][:-1]])
    p = s.predictive(b)
    assert np.all(p > -1e-12)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    # Bloch vectors stay in the unit ball and in the x-z plane
    r = beliefs[0][:, 1:]
    assert np.all(np.linalg.norm(r, axis=1) <= 1 + 1e-9)
    np.testing.assert_allclose(r[:, 1], 0.0, atol=1e-12)


@pytest.mark.parametrize("alpha,beta", [(np.nan, 1.0), (1.0, 0.0), (1.0, 4.0)])
def test_tom_quantum_rejects_bad_parameters(alpha, beta):
    with pytest.raises(SpecError):
        tom_quantum_spec(alpha, beta)


def test_paper_vocabulary_is_432_and_roundtrips():
    spec = paper_composite()
    assert spec.radices == (4, 4, 3, 3, 3)
    assert spec.vocab_size == 432
    assert spec.names == ["tom_quantum", "tom_quantum_1", "mess3", "mess3_1", "mess3_2"]
    ids = np.arange(432)
    np.testing.assert_array_equal(spec.encode(spec.decode(ids)), ids)
    # most-significant component first
    np.testing.assert_array_equal(spec.decode(np.array(3 * 27 + 0))[..., :2], [0, 3])


def test_single_component_encoding_is_identity():
    spec = compose([mess3_spec(0.05, 0.85)])
    np.testing.assert_array_equal(spec.encode(np.arange(3)[:, None]), np.arange(3))


def test_composition_preserves_row_stochasticity():
    comps = [mess3_spec(0.05, 0.85), mess3_spec(0.075, 0.9), mess3_spec(0.1, 0.95)]
    spec = compose(comps)
    total = np.zeros((27, 27))
    for y in range(spec.vocab_size):
        sym = spec.decode(np.array(y))
        op = np.ones((1, 1))
        for c, s in enumerate(comps):
            op = np.kron(op, s.transition_ops[sym[c]])
        total += op
    np.testing.assert_allclose(total.sum(axis=1), 1.0, atol=1e-12)


def test_sample_path_is_deterministic_and_exact():
    spec = paper_composite()
    t1, b1 = sample_path(spec, 16, seed=7)
    t2, b2 = sample_path(spec, 16, seed=7)
    assert t1.tobytes() == t2.tobytes()
    assert all(a.tobytes() == b.tobytes() for a, b in zip(b1, b2))
    assert t1.shape == (16,)
    sym = spec.decode(t1)
    for c, comp in enumerate(spec.components):
        np.testing.assert_allclose(b1[c], filter_beliefs(comp, sym[:, c]), atol=1e-12)


def test_filter_tokens_matches_sampler():
    spec = paper_composite()
    tokens, beliefs = sample_batch(spec, 20, 16, np.random.default_rng(2))
    again = filter_tokens(spec, tokens)
    for a, b in zip(beliefs, again):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_unigram_frequencies_match_stationary_law():
    spec = paper_composite()
    n = 1_000_000
    tokens, _ = sample_batch(spec, n, 1, np.random.default_rng(123))
    sym = spec.decode(tokens[:, 0])
    for c, comp in enumerate(spec.components):
        law = comp.predictive(comp.initial_belief)
        freq = np.bincount(sym[:, c], minlength=comp.n_symbols) / n
        se = np.sqrt(law * (1 - law) / n)
        assert np.all(np.abs(freq - law) < 3 * se), comp.name
    joint = spec.joint_predictive([c.initial_belief for c in spec.components])
    counts = np.bincount(tokens[:, 0], minlength=432)
    chi2 = (((counts - n * joint) ** 2) / (n * joint)).sum()
    assert chi2 < 432 + 5 * np.sqrt(2 * 432)


@pytest.mark.parametrize("idx", [2, 3, 4])
def test_mess3_beliefs_visit_every_vertex_region(idx):
    spec = paper_composite()
    _, beliefs = sample_batch(spec, 200, 64, np.random.default_rng(idx))
    b = beliefs[idx].reshape(-1, 3)
    assert np.all(b >= 0)
    np.testing.assert_allclose(b.sum(axis=1), 1.0, atol=1e-9)
    for v in range(3):
        assert np.any(b[:, v] > 0.8)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 40))
def test_filter_beliefs_stay_normalized(seed, length):
    spec = paper_composite()
    _, beliefs = sample_path(spec, length, seed)
    for comp, b in zip(spec.components, beliefs):
        np.testing.assert_allclose(b @ comp.normalizer, 1.0, atol=1e-9)


def test_composite_from_config():
    spec = composite_from_config([
        {"kind": "tom_quantum", "alpha": 1.51, "beta": 3.07, "name": "tq"},
        {"kind": "mess3", "x": 0.05, "a": 0.85, "name": "m"},
    ])
    assert spec.names == ["tq", "m"] and spec.vocab_size == 12
    with pytest.raises(SpecError):
        composite_from_config([{"kind": "nope"}])


def test_disk_projection_is_two_dimensional():
    spec = paper_composite()
    _, beliefs = sample_batch(spec, 50, 16, np.random.default_rng(0))
    assert disk_projection(beliefs[0]).shape == (800, 2)
