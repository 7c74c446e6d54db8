import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beliefgeom.nn import AdamW, NumericalError, Parameter, ShapeError, Tensor, clip_grad_norm, forward_backward, no_grad, ops
from beliefgeom.nn.gradcheck import OP_CASES, check, run_op_suite
from beliefgeom.nn.init import fan_in_uniform
from beliefgeom.nn.optim import cosine_lr


def test_square_gradient_at_three():
    w = Parameter(np.array(3.0))
    loss = forward_backward(lambda: ops.square(w), [w])
    assert loss == 9.0
    assert w.grad == pytest.approx(6.0)


def test_uniform_logits_cross_entropy_is_log_vocab():
    logits = Tensor(np.zeros((4, 432)))
    loss = ops.cross_entropy(logits, np.arange(4))
    assert float(loss.data) == pytest.approx(math.log(432), abs=1e-12)
    assert math.log(432) == pytest.approx(6.068, abs=1e-3)


def test_three_layer_mlp_matches_finite_differences():
    rng = np.random.default_rng(3)
    W = [Tensor(rng.standard_normal(s) * 0.5, requires_grad=True) for s in ((5, 7), (7, 6), (6, 3))]
    b = [Tensor(rng.standard_normal(s) * 0.1, requires_grad=True) for s in (7, 6, 3)]
    x = rng.standard_normal((4, 5))
    y = np.array([0, 2, 1, 2])

    def loss_fn():
        h = ops.gelu(ops.linear(Tensor(x), W[0], b[0]))
        h = ops.relu(ops.linear(h, W[1], b[1]))
        return ops.cross_entropy(ops.linear(h, W[2], b[2]), y)

    assert check(loss_fn, W + b) < 1e-4


def test_every_op_passes_gradcheck_on_random_cases():
    worst = run_op_suite(n_cases=20, seed=11)
    assert set(worst) == set(OP_CASES)
    for name, err in worst.items():
        assert err < 1e-4, name


def test_gradcheck_refuses_float32():
    t = Tensor(np.ones(3, dtype=np.float32))
    with pytest.raises(TypeError):
        check(lambda: ops.sum(t), [t])


def test_adamw_zero_gradient_leaves_value():
    p = Parameter(np.array([1.5, -2.0]))
    p.grad = np.zeros(2)
    AdamW([p], lr=1e-2).step()
    np.testing.assert_array_equal(p.data, [1.5, -2.0])
    assert p.step == 1


def test_adamw_single_step_moves_by_lr():
    p = Parameter(np.array(0.0))
    p.grad = np.array(1.0)
    AdamW([p], lr=1e-3, betas=(0.9, 0.999), eps=1e-8).step()
    # bias-corrected m/sqrt(v) = 1 on the first step
    assert float(p.data) == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-9)


def _quadratic_run(steps):
    w = Parameter(np.array(0.0))
    opt = AdamW([w], lr=1e-2)
    for _ in range(steps):
        forward_backward(lambda: ops.square(ops.sub(w, Tensor(np.array(5.0)))), [w])
        opt.step()
    return float(w.data)


def test_adamw_trajectory_matches_reference():
    # frozen from torch.optim.AdamW(lr=1e-2, weight_decay=0), float64
    assert _quadratic_run(1000) == pytest.approx(4.864669895395838, abs=1e-9)


def test_adamw_converges_on_quadratic():
    assert abs(_quadratic_run(2000) - 5.0) < 1e-2


def test_adamw_empty_params_is_noop():
    AdamW([], lr=1e-3).step()


def test_adamw_rejects_nonpositive_lr():
    with pytest.raises(ValueError):
        AdamW([], lr=0.0)


def test_weight_decay_is_decoupled():
    p = Parameter(np.array(2.0))
    p.grad = np.array(0.0)
    AdamW([p], lr=0.1, weight_decay=0.5).step()
    assert float(p.data) == pytest.approx(2.0 * (1 - 0.05))


def test_nonfinite_loss_names_op():
    x = Parameter(np.array([1.0, 2.0]))
    with pytest.raises(NumericalError) as exc:
        forward_backward(lambda: ops.mean(ops.mul(x, np.inf)), [x])
    assert exc.value.op == "mul"


def test_shape_mismatch_is_contract_violation():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    w = Tensor(np.ones((4, 2)), requires_grad=True)
    with pytest.raises(ShapeError):
        ops.matmul(a, w)


def test_forward_is_bit_deterministic():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((8, 12))
    w = fan_in_uniform(np.random.default_rng(1), (12, 9))
    b = fan_in_uniform(np.random.default_rng(2), (9,))
    a = ops.softmax(ops.linear(Tensor(x.astype(np.float32)), w, b)).data
    c = ops.softmax(ops.linear(Tensor(x.astype(np.float32)), w, b)).data
    assert a.tobytes() == c.tobytes()


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 40), st.floats(0.01, 50.0), st.integers(0, 2**31 - 1))
def test_softmax_rows_are_distributions(n, k, scale, seed):
    z = np.random.default_rng(seed).standard_normal((n, k)) * scale
    p = ops.softmax(Tensor(z)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12, rtol=0)


def test_causal_attention_ignores_future():
    rng = np.random.default_rng(4)
    qkv = rng.standard_normal((2, 6, 3 * 8))
    out1 = ops.causal_attention(Tensor(qkv), n_heads=2).data
    qkv2 = qkv.copy()
    qkv2[:, 4:] = rng.standard_normal(qkv2[:, 4:].shape)
    out2 = ops.causal_attention(Tensor(qkv2), n_heads=2).data
    np.testing.assert_array_equal(out1[:, :4], out2[:, :4])


def test_no_grad_builds_no_tape():
    w = Parameter(np.ones(3))
    with no_grad():
        y = ops.mul(w, 2.0)
    assert not y.requires_grad and y._parents == ()


def test_shared_operand_gradients_do_not_alias():
    w = Parameter(np.array([1.0, 2.0]))
    forward_backward(lambda: ops.sum(ops.add(w, w)), [w])
    np.testing.assert_allclose(w.grad, [2.0, 2.0])
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = Tensor(np.array([4.0]), requires_grad=True)
    ops.sum(ops.add(x, y)).backward()
    x.grad *= 0.5
    assert float(y.grad[0]) == 1.0


def test_clip_grad_norm_rescales():
    p = Parameter(np.zeros(2))
    p.grad = np.array([3.0, 4.0])
    total = clip_grad_norm([p], 1.0)
    assert total == pytest.approx(5.0)
    assert np.linalg.norm(p.grad) == pytest.approx(1.0, rel=1e-9)


def test_cosine_schedule_endpoints():
    assert cosine_lr(0, 100, 1.0, warmup=10) == pytest.approx(0.1)
    assert cosine_lr(10, 100, 1.0, warmup=10) == pytest.approx(1.0)
    assert cosine_lr(100, 100, 1.0, warmup=10, floor=0.1) == pytest.approx(0.1)
