import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from polyadapt.errors import ContractViolation
from polyadapt.numerics import (AdamWState, Rng, Tensor, adamw_step, backward, grad_check,
                                hash64, no_grad, ops, set_debug)


def rand(*shape, seed=0):
    return Rng(seed).normal(shape)


def check(f, x, extra=(), tol=1e-4):
    rep = grad_check(f, x, extra_params=extra)
    assert rep.passed, rep.max_rel_error
    return rep


# ---------------------------------------------------------------- grad checks per kernel

UNARY = {
    "exp": lambda x: ops.sum(ops.exp(x)),
    "log": lambda x: ops.sum(ops.log(ops.add(ops.mul(x, x), 1.0))),
    "sqrt": lambda x: ops.sum(ops.sqrt(ops.add(ops.mul(x, x), 0.5))),
    "power": lambda x: ops.sum(ops.power(ops.add(ops.mul(x, x), 1.0), 1.5)),
    "tanh": lambda x: ops.sum(ops.tanh(x)),
    "gelu": lambda x: ops.sum(ops.gelu(x)),
    "silu": lambda x: ops.sum(ops.silu(x)),
    "softmax": lambda x: ops.sum(ops.mul(ops.softmax(x), Tensor(np.arange(12.0).reshape(3, 4)))),
    "log_softmax": lambda x: ops.sum(ops.mul(ops.log_softmax(x), Tensor(np.ones((3, 4)) * 0.3))),
    "layer_norm": lambda x: ops.sum(ops.mul(ops.layer_norm(x), Tensor(rand(3, 4, seed=9)))),
    "mean": lambda x: ops.mean(ops.mul(x, x), axis=1).sum(),
    "reshape": lambda x: ops.sum(ops.mul(ops.reshape(x, (4, 3)), Tensor(rand(4, 3, seed=2)))),
    "transpose": lambda x: ops.sum(ops.mul(ops.transpose(x), Tensor(rand(4, 3, seed=3)))),
    "getitem": lambda x: ops.sum(ops.mul(x[1:, ::2], x[1:, ::2])),
    "l2_normalize": lambda x: ops.sum(ops.mul(ops.l2_normalize(x), Tensor(rand(3, 4, seed=4)))),
    "masked_mean": lambda x: ops.sum(ops.mul(
        ops.masked_mean(x, np.array([True, False, True])), Tensor(rand(4, seed=5)))),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_kernel_grads(name):
    check(UNARY[name], rand(3, 4))


@pytest.mark.parametrize("op", [ops.add, ops.sub, ops.mul, ops.div])
def test_binary_kernel_grads_with_broadcast(op):
    b = Tensor(rand(1, 4, seed=1) + 3.0, requires_grad=True)
    check(lambda x: ops.sum(ops.mul(op(x, b), op(x, b))), rand(3, 4), extra=(b,))


def test_matmul_and_linear_grads():
    w = Tensor(rand(4, 5, seed=1), requires_grad=True)
    b = Tensor(rand(5, seed=2), requires_grad=True)
    check(lambda x: ops.sum(ops.tanh(ops.matmul(x, w))), rand(2, 3, 4), extra=(w,))
    check(lambda x: ops.sum(ops.tanh(ops.linear(x, w, b))), rand(2, 3, 4), extra=(w, b))


def test_concat_stack_grads():
    y = Tensor(rand(3, 2, seed=1), requires_grad=True)
    check(lambda x: ops.sum(ops.tanh(ops.concat([x, y], axis=1))), rand(3, 4), extra=(y,))
    check(lambda x: ops.sum(ops.tanh(ops.stack([x, x * 2.0], axis=0))), rand(3, 4))


def test_group_norm_grad():
    g = Tensor(1.0 + rand(4, seed=1) * 0.1, requires_grad=True)
    b = Tensor(rand(4, seed=2) * 0.1, requires_grad=True)
    wt = Tensor(rand(2, 3, 3, 4, seed=3))
    check(lambda x: ops.sum(ops.mul(ops.group_norm(x, 2, g, b), wt)), rand(2, 3, 3, 4),
          extra=(g, b))


@pytest.mark.parametrize("k", [1, 3])
def test_conv2d_grad(k):
    w = Tensor(rand(k, k, 3, 2, seed=1), requires_grad=True)
    b = Tensor(rand(2, seed=2), requires_grad=True)
    check(lambda x: ops.sum(ops.tanh(ops.conv2d(x, w, b))), rand(2, 4, 4, 3), extra=(w, b))


@pytest.mark.parametrize("k", [1, 3])
def test_conv2d_matches_direct_loops(k):
    x, w, b = rand(2, 5, 4, 3), rand(k, k, 3, 2, seed=1), rand(2, seed=2)
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    want = np.zeros((2, 5, 4, 2)) + b
    for n in range(2):
        for i in range(5):
            for j in range(4):
                want[n, i, j] += np.einsum("abc,abco->o", xp[n, i:i + k, j:j + k], w)
    assert np.allclose(ops.conv2d(Tensor(x), Tensor(w), Tensor(b)).data, want)


def test_pool_and_upsample_grads():
    wt = Tensor(rand(1, 2, 2, 2, seed=1))
    check(lambda x: ops.sum(ops.mul(ops.avg_pool2d(x), wt)), rand(1, 4, 4, 2))
    wt2 = Tensor(rand(1, 4, 4, 2, seed=2))
    check(lambda x: ops.sum(ops.mul(ops.nearest_upsample2d(x), wt2)), rand(1, 2, 2, 2))


def test_attention_grad_with_mask():
    k = Tensor(rand(2, 5, 4, seed=1), requires_grad=True)
    v = Tensor(rand(2, 5, 3, seed=2), requires_grad=True)
    mask = np.array([[True, True, True, False, False], [True, True, True, True, True]])[:, None]
    check(lambda q: ops.sum(ops.tanh(ops.scaled_dot_product_attention(q, k, v, mask))),
          rand(2, 3, 4), extra=(k, v))


def test_embedding_and_losses_grads():
    ids = np.array([[0, 2, 2], [1, 0, 3]])
    check(lambda w: ops.sum(ops.tanh(ops.embedding(w, ids))), rand(4, 3))
    target = Tensor(rand(3, 4, seed=1))
    check(lambda x: ops.mse(x, target), rand(3, 4))
    check(lambda x: ops.cross_entropy_from_logits(x, [0, 3, 1]), rand(3, 4))
    other = Tensor(rand(3, 4, seed=2))
    check(lambda x: ops.sum(ops.cosine_similarity(x, other)), rand(3, 4))


def test_abs_away_from_kink():
    check(lambda x: ops.sum(ops.absolute(x)), np.array([0.5, -1.5, 2.0]))


def test_grad_check_flags_a_wrong_gradient():
    from polyadapt.numerics.tensor import make

    def bad(x):
        return make(np.asarray((x.data ** 2).sum()), (x,), lambda g: (g * x.data,))  # off by 2x
    assert not grad_check(bad, rand(3)).passed


def test_grad_check_rejects_large_step():
    with pytest.raises(ContractViolation):
        grad_check(lambda x: ops.sum(x), rand(3), h=0.1)


# ---------------------------------------------------------------- tape semantics

def test_shared_subexpression_accumulates():
    x = Tensor([3.0], requires_grad=True)
    y = x * x
    backward(ops.sum(y + y))
    assert x.grad[0] == 12.0


def test_tape_is_consumed():
    x = Tensor([2.0], requires_grad=True)
    loss = ops.sum(x * x)
    backward(loss)
    assert x.grad[0] == 4.0
    with pytest.raises(ContractViolation):
        backward(loss)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad
    with pytest.raises(ContractViolation):
        backward(ops.sum(y))


def test_non_scalar_backward_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractViolation):
        backward(x * 2.0)


def test_empty_tensor_rejected():
    with pytest.raises(ContractViolation):
        Tensor(np.zeros((0, 3)))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_debug_mode_catches_non_finite():
    x = Tensor([-1.0], requires_grad=True)
    set_debug(True)
    try:
        with pytest.raises(ContractViolation):
            ops.log(x)
    finally:
        set_debug(False)
    assert np.isnan(ops.sqrt(x).data[0])


def test_shape_mismatch_errors():
    with pytest.raises(ContractViolation):
        ops.matmul(Tensor(rand(2, 3)), Tensor(rand(4, 2)))
    with pytest.raises(ContractViolation):
        ops.mse(Tensor(rand(2, 3)), Tensor(rand(3, 2)))


# ---------------------------------------------------------------- properties

floats = st.floats(-5, 5, allow_nan=False, width=64)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=5), elements=floats))
def test_softmax_rows_sum_to_one(x):
    p = ops.softmax(Tensor(x)).data
    assert np.all(p >= 0)
    assert np.allclose(p.sum(axis=-1), 1.0)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (3, 4), elements=floats), st.floats(-50, 50))
def test_softmax_shift_invariant(x, c):
    assert np.allclose(ops.softmax(Tensor(x)).data, ops.softmax(Tensor(x + c)).data)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (2, 3), elements=floats), hnp.arrays(np.float64, (3,), elements=floats))
def test_broadcast_add_matches_numpy(a, b):
    ta = Tensor(a, requires_grad=True)
    tb = Tensor(b, requires_grad=True)
    out = ops.add(ta, tb)
    assert np.array_equal(out.data, a + b)
    backward(ops.sum(out))
    assert np.array_equal(tb.grad, np.full(3, 2.0))


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, (4, 6), elements=st.floats(-3, 3, width=64)))
def test_layer_norm_output_standardized(x):
    x = x + np.arange(6) * 1e-3 * (1 + np.arange(4))[:, None]  # avoid exactly constant rows
    y = ops.layer_norm(Tensor(x)).data
    assert np.allclose(y.mean(axis=-1), 0.0, atol=1e-9)
    var = x.var(axis=-1)
    expect = var / (var + 1e-5)
    assert np.allclose(y.var(axis=-1), expect, atol=1e-6)


# ---------------------------------------------------------------- rng and optimizer

def test_rng_is_deterministic_and_children_differ():
    a = Rng(7).normal((5,))
    assert np.array_equal(a, Rng(7).normal((5,)))
    assert not np.array_equal(Rng(7).child(0).normal((5,)), Rng(7).child(1).normal((5,)))
    assert hash64(1, 2) != hash64(2, 1)


def test_rng_golden_stream():
    # frozen values: any change here breaks every stored seed
    assert hash64(0) == 0x18CC49CA5BEA08CA
    assert hash64(1, 2) == 0xA4B606D672CFA396
    assert Rng(123).normal((3,)).tolist() == [
        -0.2716779317710631, 0.34397359381655934, -2.2148736262650206]


def test_truncated_normal_bound():
    x = Rng(1).truncated_normal((5000,), std=0.02, bound=2.0)
    assert np.abs(x).max() <= 0.04


def test_adamw_first_step_oracle():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.array([0.5, -0.1])
    st_ = AdamWState(lr=0.1, weight_decay=0.01)
    adamw_step([p], st_)
    # bias-corrected first step moves by lr * sign(g) after decoupled decay
    expect = np.array([1.0, -2.0]) * (1 - 0.1 * 0.01) - 0.1 * np.sign([0.5, -0.1]) / (1 + 1e-8 / np.abs([0.5, -0.1]))
    assert np.allclose(p.data, expect, atol=1e-12)
    assert p.grad is None and st_.step == 1


def test_adamw_two_step_oracle():
    p = Tensor(np.array([0.3]), requires_grad=True)
    st_ = AdamWState(lr=0.01, weight_decay=0.0)
    m = v = 0.0
    ref = 0.3
    for t, g in enumerate([0.2, -0.4], start=1):
        p.grad = np.array([g])
        adamw_step([p], st_)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert abs(p.data[0] - ref) < 1e-15


def test_adamw_missing_grad_names_param():
    p = Tensor(np.ones(2), requires_grad=True, name="w")
    with pytest.raises(ContractViolation, match="w"):
        adamw_step([p], AdamWState())


def test_adamw_quadratic_converges():
    p = Tensor(np.array([4.0, -3.0]), requires_grad=True)
    st_ = AdamWState(lr=0.1, weight_decay=0.0)
    for _ in range(300):
        backward(ops.sum(ops.mul(p, p)))
        adamw_step([p], st_)
    assert np.abs(p.data).max() < 1e-2
