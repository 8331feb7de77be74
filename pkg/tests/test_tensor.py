"""Unit tests for the tensor/autodiff substrate."""

import math
import zlib

import numpy as np
import pytest

from tsmamba import tensor as T
from tsmamba.errors import GraphError, InvalidConfig, ShapeMismatch
from tsmamba.params import Parameter


def rel_err(a, b, floor=1e-6):
    # The floor marks where central differences stop being certifiable at
    # 1e-4 relative (FD noise is ~1e-12..1e-10 absolute for these losses).
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def fd_check(f, x, tol=1e-4, h=1e-5):
    """Compare analytic gradient of scalar f(x) against central differences."""
    xt = T.Tensor(x.copy(), requires=True)
    loss = f(xt)
    grads = T.grad_map(loss)
    analytic = grads.get(id(xt), np.zeros_like(x))
    numeric = T.finite_diff_grad(f, T.tensor(x), h).array
    assert rel_err(analytic, numeric) < tol, f"analytic {analytic} vs fd {numeric}"


# ---------------------------------------------------------------------------
# conv1d
# ---------------------------------------------------------------------------


def test_conv1d_hand_cross_correlation():
    # stride-2 windows of [1,2,3,4] with kernel [1,1]: 1+2=3, 3+4=7
    out = T.conv1d(
        T.tensor([[1.0, 2.0, 3.0, 4.0]]),
        T.tensor([[[1.0, 1.0]]]),
        T.tensor([0.0]),
        stride=2,
        padding=0,
    )
    np.testing.assert_allclose(out.array, [[3.0, 7.0]])


def test_conv1d_zero_kernel_gives_bias():
    rng = np.random.default_rng(0)
    x = T.tensor(rng.standard_normal((2, 9)))
    out = T.conv1d(x, T.zeros((3, 2, 4)), T.tensor([1.5, -2.0, 0.25]), stride=1, padding=0)
    assert out.shape == (3, 6)
    np.testing.assert_allclose(out.array, np.array([1.5, -2.0, 0.25])[:, None] * np.ones((3, 6)))


def test_conv1d_identity_single_tap():
    out = T.conv1d(T.tensor([[5.0]]), T.tensor([[[1.0]]]), T.tensor([0.0]), stride=1, padding=0)
    np.testing.assert_array_equal(out.array, [[5.0]])


def test_conv1d_identity_kernel_is_exact_identity():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 17))
    w = np.zeros((3, 3, 1))
    for c in range(3):
        w[c, c, 0] = 1.0
    out = T.conv1d(T.tensor(x), T.tensor(w), None, stride=1, padding=0)
    np.testing.assert_array_equal(out.array, x)


def test_conv1d_errors():
    with pytest.raises(ShapeMismatch):
        T.conv1d(T.ones((2, 8)), T.ones((4, 3, 2)), None)
    with pytest.raises(InvalidConfig):
        T.conv1d(T.ones((1, 3)), T.ones((1, 1, 6)), None, stride=1, padding=1)


def test_conv1d_output_length_and_padding():
    out = T.conv1d(T.ones((1, 10)), T.ones((2, 1, 3)), None, stride=2, padding=1)
    assert out.shape == (2, (10 + 2 - 3) // 2 + 1)


@pytest.mark.parametrize("stride,padding,k", [(1, 0, 3), (2, 1, 3), (3, 2, 5), (1, 2, 1)])
def test_conv1d_gradients(stride, padding, k):
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 11))
    w = rng.standard_normal((3, 2, k))
    b = rng.standard_normal(3)
    proj = rng.standard_normal((3, (11 + 2 * padding - k) // stride + 1))

    def loss_x(xt):
        out = T.conv1d(xt, T.tensor(w), T.tensor(b), stride=stride, padding=padding)
        return T.sum_all(T.mul(out, T.tensor(proj)))

    def loss_w(wt):
        out = T.conv1d(T.tensor(x), wt, T.tensor(b), stride=stride, padding=padding)
        return T.sum_all(T.mul(out, T.tensor(proj)))

    def loss_b(bt):
        out = T.conv1d(T.tensor(x), T.tensor(w), bt, stride=stride, padding=padding)
        return T.sum_all(T.mul(out, T.tensor(proj)))

    fd_check(loss_x, x)
    fd_check(loss_w, w)
    fd_check(loss_b, b)


def test_depthwise_conv1d_matches_grouped_conv1d():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((2, 4, 12))
    w = rng.standard_normal((4, 3))
    dense = np.zeros((4, 4, 3))
    for c in range(4):
        dense[c, c] = w[c]
    got = T.depthwise_conv1d(T.tensor(x), T.tensor(w), None, pad_left=2, pad_right=0)
    ref = np.stack([T.conv1d(T.tensor(np.pad(x[i], ((0, 0), (2, 0)))), T.tensor(dense), None).array for i in range(2)])
    np.testing.assert_allclose(got.array, ref, atol=1e-12)


def test_depthwise_conv1d_gradients():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((2, 3, 8))
    w = rng.standard_normal((3, 4))
    b = rng.standard_normal(3)
    proj = rng.standard_normal((2, 3, 8))

    def loss_x(xt):
        return T.sum_all(T.mul(T.depthwise_conv1d(xt, T.tensor(w), T.tensor(b), 3, 0), T.tensor(proj)))

    def loss_w(wt):
        return T.sum_all(T.mul(T.depthwise_conv1d(T.tensor(x), wt, T.tensor(b), 3, 0), T.tensor(proj)))

    def loss_b(bt):
        return T.sum_all(T.mul(T.depthwise_conv1d(T.tensor(x), T.tensor(w), bt, 3, 0), T.tensor(proj)))

    fd_check(loss_x, x)
    fd_check(loss_w, w)
    fd_check(loss_b, b)


# ---------------------------------------------------------------------------
# Activations and norms
# ---------------------------------------------------------------------------


def test_softplus_values():
    out = T.softplus(T.tensor([0.0, 100.0, -100.0]))
    assert abs(out.array[0] - math.log(2.0)) < 1e-12
    assert abs(out.array[1] - 100.0) < 1e-10
    assert abs(out.array[2]) < 1e-10
    assert np.isfinite(out.array).all()


def test_softplus_float32_no_overflow():
    out = T.softplus(T.tensor([500.0, -500.0], dtype=np.float32))
    assert out.dtype == np.float32
    assert np.isfinite(out.array).all()
    assert abs(out.array[0] - 500.0) < 1e-4


def test_silu_values():
    out = T.silu(T.tensor([0.0, 50.0, 1.0]))
    assert out.array[0] == 0.0
    assert abs(out.array[1] - 50.0) < 1e-9
    assert abs(out.array[2] - 1.0 / (1.0 + math.exp(-1.0))) < 1e-12


def test_gelu_values():
    out = T.gelu(T.tensor([0.0, 1.0, -10.0]))
    assert out.array[0] == 0.0
    expected = 0.5 * (1.0 + math.erf(1.0 / math.sqrt(2.0)))  # x * Phi(x) at x=1
    assert abs(out.array[1] - expected) < 1e-12
    assert abs(out.array[2]) < 1e-6


def test_rmsnorm_values():
    np.testing.assert_allclose(
        T.rmsnorm(T.tensor([1.0, 1.0, 1.0, 1.0]), T.ones(4), eps=0.0).array, np.ones(4)
    )
    np.testing.assert_allclose(T.rmsnorm(T.tensor([2.0, 2.0]), T.ones(2), eps=0.0).array, [1.0, 1.0])
    np.testing.assert_allclose(
        T.rmsnorm(T.zeros((3, 4)), T.ones(4), eps=1e-6).array, np.zeros((3, 4))
    )


def test_rmsnorm_scale_invariance():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((5, 8))
    gain = rng.standard_normal(8)
    base = T.rmsnorm(T.tensor(x), T.tensor(gain), eps=0.0).array
    for c in (0.5, 3.0, 1e4):
        scaled = T.rmsnorm(T.tensor(c * x), T.tensor(gain), eps=0.0).array
        assert np.max(np.abs(scaled - base)) < 1e-10


def test_rmsnorm_rms_bound():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((6, 16))
    eps = 1e-5
    out = T.rmsnorm(T.tensor(x), T.ones(16), eps=eps).array
    rms = np.sqrt((out * out).mean(axis=-1))
    assert np.all(rms <= 1.0 + eps)


@pytest.mark.parametrize("op", [T.softplus, T.silu, T.gelu, T.exp, T.absolute])
@pytest.mark.parametrize("shape", [(7,), (3, 5), (2, 3, 4)])
def test_elementwise_gradients(op, shape):
    seed = zlib.crc32(f"{op.__name__}{shape}".encode())  # stable across runs
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape) * 2.0 + 0.1  # keep |x| away from abs kink
    proj = rng.standard_normal(shape)
    fd_check(lambda xt: T.sum_all(T.mul(op(xt), T.tensor(proj))), x)


def test_rmsnorm_gradients():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((4, 6))
    gain = rng.standard_normal(6)
    proj = rng.standard_normal((4, 6))
    fd_check(lambda xt: T.sum_all(T.mul(T.rmsnorm(xt, T.tensor(gain), 1e-5), T.tensor(proj))), x)
    fd_check(lambda gt: T.sum_all(T.mul(T.rmsnorm(T.tensor(x), gt, 1e-5), T.tensor(proj))), gain)


def test_softmax_rows_sum_to_one_and_grad():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((3, 5))
    out = T.softmax(T.tensor(x), axis=-1)
    np.testing.assert_allclose(out.array.sum(axis=-1), np.ones(3), atol=1e-12)
    proj = rng.standard_normal((3, 5))
    fd_check(lambda xt: T.sum_all(T.mul(T.softmax(xt, axis=-1), T.tensor(proj))), x)


# ---------------------------------------------------------------------------
# Structural / arithmetic gradients
# ---------------------------------------------------------------------------


def test_binary_ops_require_equal_shapes():
    with pytest.raises(ShapeMismatch):
        T.add(T.ones((2, 3)), T.ones((3,)))
    with pytest.raises(ShapeMismatch):
        T.mul(T.ones((2,)), T.ones((2, 1)))


def test_binary_ops_require_equal_dtypes():
    with pytest.raises(ShapeMismatch):
        T.add(T.ones((2,), dtype=np.float32), T.ones((2,), dtype=np.float64))


def test_matmul_shapes_and_gradients():
    rng = np.random.default_rng(8)
    a = rng.standard_normal((4, 3))
    b = rng.standard_normal((3, 5))
    np.testing.assert_allclose(T.matmul(T.tensor(a), T.tensor(b)).array, a @ b)
    proj = rng.standard_normal((4, 5))
    fd_check(lambda t: T.sum_all(T.mul(T.matmul(t, T.tensor(b)), T.tensor(proj))), a)
    fd_check(lambda t: T.sum_all(T.mul(T.matmul(T.tensor(a), t), T.tensor(proj))), b)

    # batched [B, L, D] @ [D, N]
    ab = rng.standard_normal((2, 4, 3))
    proj_b = rng.standard_normal((2, 4, 5))
    fd_check(lambda t: T.sum_all(T.mul(T.matmul(T.tensor(ab), t), T.tensor(proj_b))), b)
    fd_check(lambda t: T.sum_all(T.mul(T.matmul(t, T.tensor(b)), T.tensor(proj_b))), ab)

    # fully batched [T, C, D] @ [T, D, C]
    q = rng.standard_normal((3, 2, 5))
    k = rng.standard_normal((3, 5, 2))
    proj_q = rng.standard_normal((3, 2, 2))
    fd_check(lambda t: T.sum_all(T.mul(T.matmul(t, T.tensor(k)), T.tensor(proj_q))), q)
    fd_check(lambda t: T.sum_all(T.mul(T.matmul(T.tensor(q), t), T.tensor(proj_q))), k)


def test_structural_gradients():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((3, 4, 5))

    cases = [
        lambda t: T.reshape(t, (12, 5)),
        lambda t: T.transpose(t, (2, 0, 1)),
        lambda t: T.flip(t, axis=1),
        lambda t: T.slice_axis(t, 2, 1, 4),
        lambda t: T.index_axis(t, 1, 2),
        lambda t: T.broadcast_to(T.reshape(t, (3, 4, 5)), (3, 4, 5)),
    ]
    for f in cases:
        shape = f(T.tensor(x)).shape
        proj = rng.standard_normal(shape)
        fd_check(lambda t, f=f, proj=proj: T.sum_all(T.mul(f(t), T.tensor(proj))), x)

    g = rng.standard_normal((1, 4))
    proj = rng.standard_normal((3, 4))
    fd_check(lambda t: T.sum_all(T.mul(T.broadcast_to(t, (3, 4)), T.tensor(proj))), g)


def test_concat_and_where_gradients():
    rng = np.random.default_rng(12)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    cond = rng.standard_normal((3, 4)) > 0
    proj6 = rng.standard_normal((6, 4))
    proj3 = rng.standard_normal((3, 4))
    fd_check(lambda t: T.sum_all(T.mul(T.concat([t, T.tensor(b)], axis=0), T.tensor(proj6))), a)
    fd_check(lambda t: T.sum_all(T.mul(T.where(cond, t, T.tensor(b)), T.tensor(proj3))), a)
    fd_check(lambda t: T.sum_all(T.mul(T.where(cond, T.tensor(a), t), T.tensor(proj3))), b)


def test_div_and_mean_gradients():
    rng = np.random.default_rng(13)
    a = rng.standard_normal((4, 4))
    b = rng.standard_normal((4, 4)) + 3.0
    fd_check(lambda t: T.mean_all(T.div(t, T.tensor(b))), a)
    fd_check(lambda t: T.mean_all(T.div(T.tensor(a), t)), b)


# ---------------------------------------------------------------------------
# backward() contract
# ---------------------------------------------------------------------------


def test_backward_quadratic():
    p = Parameter("p", T.tensor([3.0]))
    loss = T.sum_all(T.mul(p.value, p.value))
    T.backward(loss, [p])
    np.testing.assert_allclose(p.grad.array, [6.0])


def test_backward_disconnected_loss_gives_zero_grads():
    p = Parameter("p", T.tensor([1.0, 2.0]))
    loss = T.sum_all(T.tensor([4.0]))
    T.backward(loss, [p])
    np.testing.assert_array_equal(p.grad.array, [0.0, 0.0])


def test_backward_non_scalar_raises():
    p = Parameter("p", T.tensor([1.0, 2.0]))
    with pytest.raises(GraphError):
        T.backward(T.mul(p.value, p.value), [p])


def test_backward_skips_non_trainable():
    p = Parameter("p", T.tensor([2.0]), trainable=False)
    q = Parameter("q", T.tensor([3.0]))
    loss = T.sum_all(T.mul(p.value, q.value))
    T.backward(loss, [p, q])
    assert p.grad is None
    np.testing.assert_allclose(q.grad.array, [2.0])


def test_backward_tiny_model_matches_finite_differences():
    rng = np.random.default_rng(21)
    w1 = Parameter("w1", T.tensor(rng.standard_normal((3, 4))))
    w2 = Parameter("w2", T.tensor(rng.standard_normal((4, 2))))
    x = rng.standard_normal((5, 3))
    y = rng.standard_normal((5, 2))

    def forward(w1v, w2v):
        h = T.gelu(T.matmul(T.tensor(x), w1v))
        out = T.matmul(h, w2v)
        err = T.sub(out, T.tensor(y))
        return T.mean_all(T.mul(err, err))

    loss = forward(w1.value, w2.value)
    T.backward(loss, [w1, w2])
    fd1 = T.finite_diff_grad(lambda t: forward(t, w2.value), T.tensor(w1.value.array), 1e-5)
    fd2 = T.finite_diff_grad(lambda t: forward(w1.value, t), T.tensor(w2.value.array), 1e-5)
    assert rel_err(w1.grad.array, fd1.array) < 1e-4
    assert rel_err(w2.grad.array, fd2.array) < 1e-4


def test_finite_diff_grad_examples():
    fd = T.finite_diff_grad(lambda t: T.sum_all(T.mul(t, t)), T.tensor([1.0, 2.0]), 1e-5)
    np.testing.assert_allclose(fd.array, [2.0, 4.0], atol=1e-8)
    fd = T.finite_diff_grad(lambda t: T.sum_all(T.tensor([7.0])), T.tensor([1.0, 2.0]), 1e-5)
    np.testing.assert_array_equal(fd.array, [0.0, 0.0])
    fd = T.finite_diff_grad(lambda t: T.sum_all(t), T.tensor([5.0, -1.0, 0.0]), 1e-5)
    np.testing.assert_allclose(fd.array, [1.0, 1.0, 1.0], atol=1e-9)


def test_no_grad_suppresses_recording():
    p = Parameter("p", T.tensor([2.0]))
    with T.no_grad():
        out = T.mul(p.value, p.value)
    assert out.pairs == ()
    loss = T.sum_all(out)
    T.backward(loss, [p])
    np.testing.assert_array_equal(p.grad.array, [0.0])


def test_determinism_bit_identical():
    rng = np.random.default_rng(33)
    x = rng.standard_normal((4, 6))
    w = rng.standard_normal((6, 3))

    def run():
        return T.matmul(T.gelu(T.tensor(x)), T.tensor(w)).array.tobytes()

    assert run() == run()
