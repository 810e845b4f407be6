import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tcnhr import ops
from tcnhr.errors import ArgumentError, DimensionError, TapeError
from tcnhr.tensor import GradTape, Tensor

from oracles import central_diff, conv_bruteforce, max_rel_err

GRAD_TOL = 1e-4


# ---------------------------------------------------------------- conv forward


def test_conv_dilated_example():
    y = ops.conv1d_causal(np.array([[1, 2, 3, 4]], np.float32), np.ones((1, 1, 2), np.float32), dilation=2)
    np.testing.assert_array_equal(y.data, [[1, 2, 4, 6]])


@pytest.mark.parametrize("d", [1, 2, 5])
def test_conv_identity_kernel(d):
    rng = np.random.default_rng(d)
    x = rng.standard_normal((3, 17)).astype(np.float32)
    w = np.eye(3, dtype=np.float32)[:, :, None]
    y = ops.conv1d_causal(x, w, np.zeros(3, np.float32), dilation=d)
    np.testing.assert_array_equal(y.data, x)


@pytest.mark.parametrize("seed", range(10))
def test_conv_matches_bruteforce(seed):
    rng = np.random.default_rng(seed)
    c_in, c_out, t = rng.integers(1, 5), rng.integers(1, 5), rng.integers(5, 40)
    k, d, s = rng.choice([1, 3, 5]), rng.choice([1, 2, 4, 8]), rng.choice([1, 2])
    x = rng.standard_normal((c_in, t)).astype(np.float32)
    w = rng.standard_normal((c_out, c_in, k)).astype(np.float32)
    b = rng.standard_normal(c_out).astype(np.float32)
    got = ops.conv1d_causal(x, w, b, dilation=d, stride=s).data
    want = conv_bruteforce(x, w, b, d, s)
    assert got.shape == (c_out, -(-t // s))
    assert np.abs(got - want).max() <= 1e-6 * max(1.0, np.abs(want).max())


def test_conv_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(3, 10\).*\(2, 4, 3\)"):
        ops.conv1d_causal(np.zeros((3, 10)), np.zeros((2, 4, 3)))


def test_conv_rejects_bad_dilation():
    with pytest.raises(ArgumentError):
        ops.conv1d_causal(np.zeros((1, 4)), np.zeros((1, 1, 2)), dilation=0)


@settings(max_examples=40, deadline=None)
@given(
    t=st.integers(4, 30),
    cut=st.integers(0, 29),
    k=st.sampled_from([1, 2, 3, 5]),
    d=st.sampled_from([1, 2, 3, 8]),
    seed=st.integers(0, 2**16),
)
def test_conv_causality(t, cut, k, d, seed):
    cut = cut % t
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, t)).astype(np.float32)
    w = rng.standard_normal((3, 2, k)).astype(np.float32)
    y = ops.conv1d_causal(x, w, dilation=d).data
    x2 = x.copy()
    x2[:, cut + 1 :] = 0
    y2 = ops.conv1d_causal(x2, w, dilation=d).data
    np.testing.assert_array_equal(y[:, : cut + 1], y2[:, : cut + 1])


@settings(max_examples=30, deadline=None)
@given(d=st.integers(1, 4), k=st.integers(1, 4), phase=st.integers(0, 3), seed=st.integers(0, 2**16))
def test_dilation_equals_subsampled_undilated(d, k, phase, seed):
    """On the time lattice t = phase + d*n, dilation d acts like d=1 on x[phase::d]."""
    phase = phase % d
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 24)).astype(np.float64)
    w = rng.standard_normal((2, 2, k))
    full = ops.conv1d_causal(x, w, dilation=d).data
    sub = ops.conv1d_causal(np.ascontiguousarray(x[:, phase::d]), w, dilation=1).data
    np.testing.assert_allclose(full[:, phase::d], sub, rtol=1e-12, atol=1e-12)


def test_conv_strided_causality():
    x = np.arange(1, 11, dtype=np.float32)[None]
    w = np.ones((1, 1, 3), np.float32)
    y = ops.conv1d_causal(x, w, stride=2).data[0]
    # output t sees x[2t], x[2t-1], x[2t-2]
    np.testing.assert_array_equal(y, [1, 6, 12, 18, 24])


def test_forward_deterministic():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 3, 50)).astype(np.float32)
    w = rng.standard_normal((5, 3, 3)).astype(np.float32)
    a = ops.conv1d_causal(x, w, dilation=2).data
    b = ops.conv1d_causal(x, w, dilation=2).data
    assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------- conv backward


def test_conv_backward_bias_is_length():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((1, 2, 9)))
    w = Tensor(rng.standard_normal((3, 2, 3)), requires_grad=True)
    b = Tensor(np.zeros(3), requires_grad=True)
    with GradTape() as tape:
        y = ops.conv1d_causal(x, w, b, dilation=2)
    tape.backward(y)  # loss = sum(y)
    np.testing.assert_allclose(tape.grad(b), [9, 9, 9])


def test_conv_backward_zero_grad():
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((2, 2, 9)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 2, 3)), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    with GradTape() as tape:
        y = ops.conv1d_causal(x, w, b)
    tape.backward(y, np.zeros(y.shape))
    for t in (x, w, b):
        assert not tape.grad(t).any()


def test_conv_backward_without_forward():
    with pytest.raises(TapeError):
        ops.conv1d_backward(np.zeros((1, 1, 4)), None)
    with pytest.raises(TapeError):
        GradTape().backward(Tensor([1.0]))


# ---------------------------------------------------------------- other ops


def test_relu_and_pool_examples():
    np.testing.assert_array_equal(ops.relu(np.array([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    np.testing.assert_array_equal(ops.avgpool1d(np.array([[[1.0, 3, 5, 7]]]), 2, 2).data, [[[2, 6]]])


def test_pool_window_too_large():
    with pytest.raises(ArgumentError):
        ops.avgpool1d(np.zeros((1, 1, 3)), 4, 4)


def test_batchnorm_normalized_input_unchanged():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((16, 3, 32))
    x = (x - x.mean(axis=(0, 2), keepdims=True)) / x.std(axis=(0, 2), keepdims=True)
    x = x.astype(np.float32)
    y = ops.batchnorm(x, np.ones(3), np.zeros(3), np.zeros(3, np.float32), np.ones(3, np.float32), True)
    # unit variance in, so only eps moves the values
    np.testing.assert_allclose(y.data, x / np.sqrt(1 + ops.BN_EPS), rtol=1e-5, atol=1e-6)


def test_batchnorm_infer_repeatable_and_stateless():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((5, 3, 7)).astype(np.float32)
    rm, rv = rng.standard_normal(3).astype(np.float32), rng.uniform(0.5, 2, 3).astype(np.float32)
    rm0, rv0 = rm.copy(), rv.copy()
    g, b = np.ones(3, np.float32), np.zeros(3, np.float32)
    a = ops.batchnorm(x, g, b, rm, rv, False).data
    c = ops.batchnorm(x, g, b, rm, rv, False).data
    assert a.tobytes() == c.tobytes()
    assert rm.tobytes() == rm0.tobytes() and rv.tobytes() == rv0.tobytes()


def test_batchnorm_running_stats_update():
    x = np.arange(8, dtype=np.float32).reshape(4, 2)
    rm, rv = np.zeros(2, np.float32), np.ones(2, np.float32)
    ops.batchnorm(x, np.ones(2), np.zeros(2), rm, rv, True)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=0), rtol=1e-6)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=0, ddof=1), rtol=1e-6)


def test_batchnorm_empty_batch():
    with pytest.raises(ArgumentError):
        ops.batchnorm(np.zeros((0, 2, 3)), np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), True)


def test_logcosh_examples():
    t = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    with GradTape() as tape:
        loss = ops.logcosh_loss(t, [1.0, -2.0, 3.0])
    tape.backward(loss)
    assert float(loss.data) == 0.0
    assert not tape.grad(t).any()
    big = ops.logcosh_loss(np.array([1000.0], np.float32), np.array([0.0], np.float32))
    assert np.isfinite(big.data)
    assert abs(float(big.data) - (1000 - np.log(2))) < 1e-3


def test_logcosh_empty():
    with pytest.raises(ArgumentError):
        ops.logcosh_loss(np.zeros(0), np.zeros(0))


def test_tape_reverse_order_and_accumulation():
    order = []
    from tcnhr.tensor import record

    a = Tensor([1.0], requires_grad=True)
    with GradTape() as tape:
        b = record(Tensor([2.0]), (a,), lambda g: order.append("b") or (g,))
        c = record(Tensor([3.0]), (b, a), lambda g: order.append("c") or (g, 2 * g))
    tape.backward(c)
    assert order == ["c", "b"]
    np.testing.assert_array_equal(tape.grad(a), [3.0])  # 2 (direct) + 1 (via b)


# ---------------------------------------------------------------- gradient suite


def _check(build, arrays, seed_grad_shape_rng):
    """Compare tape gradients of sum(out * R) with central differences."""
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with GradTape() as tape:
        out = build(*leaves)
    r = seed_grad_shape_rng.standard_normal(out.shape)
    tape.backward(out, r)
    worst = 0.0
    for leaf, arr in zip(leaves, arrays):
        num = central_diff(lambda: float((build(*[Tensor(a) for a in arrays]).data * r).sum()), arr)
        worst = max(worst, max_rel_err(tape.grad(leaf), num))
    return worst


def _conv_case(rng, rank):
    c_in, c_out, t = rng.integers(1, 4), rng.integers(1, 4), rng.integers(4, 12)
    k, d, s = int(rng.choice([1, 2, 3])), int(rng.choice([1, 2, 3])), int(rng.choice([1, 2]))
    shape = (c_in, t) if rank == 2 else (2, c_in, t)
    arrays = [rng.standard_normal(shape), rng.standard_normal((c_out, c_in, k)), rng.standard_normal(c_out)]
    return (lambda x, w, b: ops.conv1d_causal(x, w, b, dilation=d, stride=s)), arrays


def _bn_case(rng, rank, training):
    c = rng.integers(1, 4)
    shape = (4, c) if rank == 2 else (3, c, 5)
    arrays = [rng.standard_normal(shape), rng.uniform(0.5, 1.5, c), rng.standard_normal(c)]
    rm, rv = rng.standard_normal(c), rng.uniform(0.5, 2, c)

    def build(x, g, b):
        return ops.batchnorm(x, g, b, rm.copy(), rv.copy(), training)

    return build, arrays


def _relu_case(rng, rank):
    shape = (7,) if rank == 1 else (3, 4, 5)[:rank]
    x = rng.standard_normal(shape)
    x = np.where(np.abs(x) < 0.05, 0.5, x)  # keep away from the kink
    return ops.relu, [x]


def _pool_case(rng, rank):
    w = int(rng.integers(1, 4))
    s = int(rng.integers(1, 4))
    shape = (2, 3, 11) if rank == 3 else (3, 11)
    return (lambda x: ops.avgpool1d(x, w, s)), [rng.standard_normal(shape)]


def _linear_case(rng, rank):
    i, o = rng.integers(1, 6), rng.integers(1, 6)
    shape = (i,) if rank == 1 else (3, i)
    return ops.linear, [rng.standard_normal(shape), rng.standard_normal((o, i)), rng.standard_normal(o)]


def _logcosh_case(rng, rank):
    target = rng.standard_normal(6) * 3
    return (lambda p: ops.logcosh_loss(p, target)), [rng.standard_normal(6) * 3]


CASES = {
    "conv_rank2": lambda r: _conv_case(r, 2),
    "conv_rank3": lambda r: _conv_case(r, 3),
    "bn_train_rank2": lambda r: _bn_case(r, 2, True),
    "bn_train_rank3": lambda r: _bn_case(r, 3, True),
    "bn_infer_rank3": lambda r: _bn_case(r, 3, False),
    "relu_rank1": lambda r: _relu_case(r, 1),
    "relu_rank3": lambda r: _relu_case(r, 3),
    "pool_rank2": lambda r: _pool_case(r, 2),
    "pool_rank3": lambda r: _pool_case(r, 3),
    "linear_rank1": lambda r: _linear_case(r, 1),
    "linear_rank2": lambda r: _linear_case(r, 2),
    "logcosh": lambda r: _logcosh_case(r, 1),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradients_match_finite_differences(name):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        build, arrays = CASES[name](rng)
        worst = max(worst, _check(build, arrays, rng))
    assert worst < GRAD_TOL, f"{name}: max relative error {worst:.2e}"
