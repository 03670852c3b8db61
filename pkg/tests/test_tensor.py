import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tfman import tensor as T
from tfman.gradcheck import gradcheck, run_target
from tfman.tensor import ConfigurationError, Tensor


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def conv_loops(x, k, stride, pad):
    """Direct nested-loop convolution (cross-correlation)."""
    B, Cin, H, W = x.shape
    Cout, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, Cout, Ho, Wo))
    for b in range(B):
        for o in range(Cout):
            for i in range(Ho):
                for j in range(Wo):
                    out[b, o, i, j] = np.sum(xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw] * k[o])
    return out


def scatter_loops(x, k, stride, pad):
    B, Cin, H, W = x.shape
    _, Cout, kh, kw = k.shape
    full = np.zeros((B, Cout, (H - 1) * stride + kh, (W - 1) * stride + kw))
    for b in range(B):
        for c in range(Cin):
            for i in range(H):
                for j in range(W):
                    full[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw] += x[b, c, i, j] * k[c]
    return full[:, :, pad:full.shape[2] - pad, pad:full.shape[3] - pad]


# ---------------------------------------------------------------- conv2d


def test_conv2d_identity_kernel():
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    out = T.conv2d(t64(x), t64([[[[1.0]]]]), None, 1, 0)
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_zero_kernel_annihilates():
    x = np.random.default_rng(0).normal(size=(2, 3, 5, 5))
    out = T.conv2d(t64(x), t64(np.zeros((4, 3, 3, 3))), None, 1, 1)
    assert out.shape == (2, 4, 5, 5)
    assert not out.data.any()


def test_conv2d_ones_gives_nine():
    out = T.conv2d(t64(np.ones((1, 1, 4, 4))), t64(np.ones((1, 1, 3, 3))), None, 1, 0)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 9.0))


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 2, 6), (3, 3, 9), (1, 0, 1)])
def test_conv2d_matches_loops(stride, pad, k):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.normal(size=(2, 3, 11, 10))
    w = rng.normal(size=(4, 3, k, k))
    np.testing.assert_allclose(T.conv2d(t64(x), t64(w), None, stride, pad).data,
                               conv_loops(x, w, stride, pad), atol=1e-12)


def test_conv2d_bias_broadcasts():
    x = np.zeros((1, 2, 3, 3))
    out = T.conv2d(t64(x), t64(np.zeros((3, 2, 1, 1))), t64([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(out.data[0, :, 1, 1], [1, 2, 3])


def test_conv2d_channel_mismatch():
    with pytest.raises(ConfigurationError):
        T.conv2d(t64(np.zeros((1, 2, 4, 4))), t64(np.zeros((1, 3, 3, 3))))


# ---------------------------------------------------------------- conv_transpose2d


def test_conv_transpose_identity():
    x = np.random.default_rng(1).normal(size=(1, 1, 4, 5))
    np.testing.assert_array_equal(T.conv_transpose2d(t64(x), t64([[[[1.0]]]]), None, 1, 0).data, x)


def test_conv_transpose_hand_scatter():
    out = T.conv_transpose2d(t64([[[[2.0]]]]), t64([[[[1.0, 2.0], [3.0, 4.0]]]]), None, 2, 0)
    np.testing.assert_array_equal(out.data, [[[[2, 4], [6, 8]]]])


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (2, 2, 6), (2, 1, 3), (3, 3, 9), (2, 0, 2)])
def test_conv_transpose_matches_loops(stride, pad, k):
    rng = np.random.default_rng(k)
    x = rng.normal(size=(2, 3, 5, 4))
    w = rng.normal(size=(3, 2, k, k))
    np.testing.assert_allclose(T.conv_transpose2d(t64(x), t64(w), None, stride, pad).data,
                               scatter_loops(x, w, stride, pad), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    stride=st.integers(1, 3),
    k=st.integers(1, 5),
    pad=st.integers(0, 2),
    hw=st.tuples(st.integers(5, 9), st.integers(5, 9)),
    chans=st.tuples(st.integers(1, 3), st.integers(1, 3)),
)
def test_adjoint_identity(seed, stride, k, pad, hw, chans):
    """<conv(x, k), y> == <x, conv_transpose(y, k)> whenever the shapes line up exactly."""
    rng = np.random.default_rng(seed)
    cin, cout = chans
    H, W = hw
    pad = min(pad, k - 1)
    # choose input extents that conv_transpose reproduces exactly
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    H, W = (Ho - 1) * stride + k - 2 * pad, (Wo - 1) * stride + k - 2 * pad
    x = rng.normal(size=(1, cin, H, W))
    w = rng.normal(size=(cout, cin, k, k))
    y = rng.normal(size=(1, cout, Ho, Wo))
    lhs = np.sum(T.conv2d(t64(x), t64(w), None, stride, pad).data * y)
    rhs = np.sum(x * T.conv_transpose2d(t64(y), t64(w), None, stride, pad).data)
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


# ---------------------------------------------------------------- softmax


def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(t64([1.0, 1, 1, 1])).data, 0.25)


def test_softmax_closed_form():
    np.testing.assert_allclose(T.softmax(t64([0.0, np.log(2)])).data, [1 / 3, 2 / 3], atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), axis=st.integers(0, 2), shift=st.floats(-50, 50))
def test_softmax_normalized_and_shift_invariant(seed, axis, shift):
    x = np.random.default_rng(seed).normal(scale=5, size=(3, 4, 5))
    a = T.softmax(t64(x), axis).data
    b = T.softmax(t64(x + shift), axis).data
    np.testing.assert_allclose(a.sum(axis=axis), 1.0, atol=1e-6)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_softmax_large_inputs_stay_finite():
    out = T.softmax(t64([1000.0, 0.0])).data
    assert np.all(np.isfinite(out)) and out[0] == pytest.approx(1.0)


# ---------------------------------------------------------------- prelu


def test_prelu_positive_unchanged():
    x = np.abs(np.random.default_rng(2).normal(size=(1, 2, 3, 3))) + 0.1
    np.testing.assert_array_equal(T.prelu(t64(x), t64([0.25])).data, x)


def test_prelu_zero_slope_is_relu():
    x = np.array([[-1.0, 2.0, -3.0]])
    np.testing.assert_array_equal(T.prelu(t64(x), t64([0.0])).data, [[0, 2, 0]])


def test_prelu_closed_form():
    assert T.prelu(t64([[-2.0]]), t64([0.25])).data.item() == -0.5


def test_prelu_per_channel():
    x = -np.ones((1, 2, 1, 1))
    out = T.prelu(t64(x), t64([0.1, 0.5])).data
    np.testing.assert_allclose(out.ravel(), [-0.1, -0.5])


def test_prelu_rejects_wrong_slope_size():
    with pytest.raises(ConfigurationError):
        T.prelu(t64(np.zeros((1, 3, 2, 2))), t64([0.1, 0.2]))


# ---------------------------------------------------------------- bilinear


def test_bilinear_identity():
    x = np.random.default_rng(3).normal(size=(2, 3, 5, 6))
    np.testing.assert_allclose(T.bilinear_resize(t64(x), 5, 6).data, x, atol=1e-15)


def test_bilinear_constant():
    out = T.bilinear_resize(t64(np.full((1, 1, 6, 6), 3.5)), 2, 9).data
    np.testing.assert_allclose(out, 3.5)


def test_bilinear_column_hand_value():
    x = np.array([0.0, 1, 2, 3]).reshape(1, 1, 4, 1)
    np.testing.assert_allclose(T.bilinear_resize(t64(x), 2, 1).data.ravel(), [0.5, 2.5])


def test_bilinear_rows_sum_to_one():
    for n_in, n_out in [(9, 3), (3, 9), (7, 7), (6, 4)]:
        np.testing.assert_allclose(T.bilinear_matrix(n_in, n_out).sum(axis=1), 1.0)


# ---------------------------------------------------------------- pooling / matmul


def test_global_avg_pool():
    assert T.global_avg_pool(t64(np.full((1, 1, 3, 3), 7.0))).data.item() == 7.0
    assert T.global_avg_pool(t64([[[[1.0, 2.0], [3.0, 4.0]]]])).data.item() == 2.5


def test_global_avg_pool_permutation_invariant():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 4, 5))
    perm = rng.permutation(20)
    xp = x.reshape(2, 3, 20)[:, :, perm].reshape(2, 3, 4, 5)
    np.testing.assert_allclose(T.global_avg_pool(t64(x)).data, T.global_avg_pool(t64(xp)).data, atol=1e-15)


def test_matmul_identity_and_closed_form():
    a = np.random.default_rng(5).normal(size=(3, 3))
    np.testing.assert_array_equal(T.matmul(t64(a), t64(np.eye(3))).data, a)
    np.testing.assert_array_equal(T.matmul(t64([[1.0, 2], [3, 4]]), t64([[1.0], [1]])).data, [[3], [7]])


def test_matmul_triple_loop():
    rng = np.random.default_rng(6)
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    ref = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for k in range(7):
                ref[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(T.matmul(t64(a), t64(b)).data, ref, atol=1e-12)


def test_matmul_batched_broadcast():
    rng = np.random.default_rng(7)
    a, b = rng.normal(size=(4, 2, 3)), rng.normal(size=(3, 5))
    np.testing.assert_allclose(T.matmul(t64(a), t64(b)).data, a @ b)


# ---------------------------------------------------------------- backward


def test_backward_sum_gives_ones():
    x = t64(np.random.default_rng(8).normal(size=(3, 4)), grad=True)
    T.tsum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_square_gives_2x():
    data = np.random.default_rng(9).normal(size=(3, 4))
    x = t64(data, grad=True)
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * data)


def test_backward_accumulates_shared_nodes():
    x = t64([3.0], grad=True)
    y = x * x
    (y + y * 2.0).sum().backward()
    assert x.grad.item() == pytest.approx(18.0)


def test_backward_requires_scalar():
    x = t64(np.ones(3), grad=True)
    with pytest.raises(RuntimeError):
        (x * 2.0).backward()


def test_no_grad_records_nothing():
    x = t64(np.ones(3), grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


def test_deep_chain_backward_is_iterative():
    x = t64([1.0], grad=True)
    y = x
    for _ in range(5000):
        y = y + 0.0
    y.sum().backward()
    assert x.grad.item() == 1.0


def test_tensor_ops_gradcheck():
    reports = run_target("tensor")
    for r in reports:
        assert r.passed, r.summary()
    assert {r.label for r in reports} >= {f"tensor.{op}" for op in
                                           ("conv2d", "conv_transpose2d", "softmax", "prelu",
                                            "bilinear_resize", "global_avg_pool", "matmul")}


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_composition_gradcheck(seed):
    """A random composition of several ops still matches central differences."""
    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        x = t64(rng.normal(size=(1, 2, 5, 5)), grad=True)
        k = t64(rng.normal(size=(3, 2, 3, 3)), grad=True)
        kt = t64(rng.normal(size=(3, 2, 2, 2)), grad=True)
        slope = t64([0.2], grad=True)
        probe = rng.normal(size=(1, 2, 6, 6))

        def f():
            h = T.prelu(T.conv2d(x, k, None, 1, 1), slope)
            h = T.softmax(T.bilinear_resize(h, 3, 3), axis=1)
            h = T.conv_transpose2d(h, kt, None, 2, 0)
            return (h * probe).sum() + T.global_avg_pool(h).sum()

        report = gradcheck(f, [x, k, kt, slope], h=1e-3, order=4, tolerance=1e-6)
    assert report.passed, report.summary()


def test_gradcheck_flags_kinks():
    """A perturbation that moves an abs() input across zero is excluded, not scored."""
    x = t64([1e-7, 1.0], grad=True)
    report = gradcheck(lambda: T.tabs(x).sum(), [x], h=1e-5)
    assert report.kinks == 1
    assert report.passed


def test_ops_are_pure():
    rng = np.random.default_rng(10)
    x, w = rng.normal(size=(1, 3, 8, 8)), rng.normal(size=(4, 3, 3, 3))
    a = T.conv2d(t64(x), t64(w), None, 2, 1).data
    b = T.conv2d(t64(x), t64(w), None, 2, 1).data
    assert a.tobytes() == b.tobytes()


def test_mac_counter_conv():
    x = Tensor(np.zeros((1, 2, 4, 4)))
    with T.count_macs() as c, T.mac_tag("x"):
        T.conv2d(x, Tensor(np.zeros((3, 2, 3, 3))), None, 1, 1)
    assert c["x"] == 3 * 2 * 9 * 16


def test_precision_context():
    with T.precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32
