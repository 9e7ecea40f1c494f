import math

import numpy as np
import pytest
from scipy import signal

from advbn import tensor as T
from advbn.tensor import ShapeError, Tape, TapeError, Tensor, backward, finite_diff_check

TOL = 1e-6


def grad_of(fn, *xs):
    with Tape() as tape:
        ts = [Tensor(x) for x in xs]
        tape.watch(*ts)
        out = fn(*ts)
    return backward(out, ts)


# ---------------------------------------------------------------- Tensor basics


def test_tensor_outside_tape_has_no_handle():
    t = Tensor(np.ones((2, 3)))
    assert t.grad_handle is None
    assert t.size == 6 == int(np.prod(t.shape))


def test_default_dtype_switch():
    assert Tensor(np.ones(2)).dtype == np.float32
    with T.default_dtype(np.float64):
        assert Tensor(np.ones(2)).dtype == np.float64
    assert Tensor(np.ones(2)).dtype == np.float32


def test_watch_assigns_handle_and_detach_drops_it(f64):
    with Tape() as tape:
        x = Tensor(np.ones(3))
        tape.watch(x)
        assert x.grad_handle is not None
        y = T.mul(x, x)
        assert y.grad_handle is not None
        assert y.detach().grad_handle is None


# ---------------------------------------------------------------- conv2d


def test_conv_identity_kernel():
    x = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3)
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), 1, 0)
    np.testing.assert_array_equal(out.data, x.astype(np.float32))


def test_conv_sum_case():
    out = T.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 2, 2))), 1, 0)
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 4.0


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_scipy_correlate(f64, rng, stride, pad):
    x = rng.standard_normal((2, 3, 7, 7))
    w = rng.standard_normal((4, 3, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(w), stride, pad).data
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ref = np.zeros_like(out)
    for n in range(2):
        for o in range(4):
            full = sum(signal.correlate2d(xp[n, c], w[o, c], mode="valid") for c in range(3))
            ref[n, o] = full[::stride, ::stride]
    assert out.shape == (2, 4, (7 + 2 * pad - 3) // stride + 1, (7 + 2 * pad - 3) // stride + 1)
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(1, 2, 4, 4\).*\(1, 3, 3, 3\)|\(1, 3, 3, 3\).*\(1, 2, 4, 4\)"):
        T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_conv_kernel_larger_than_input():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


def test_conv_bad_stride():
    with pytest.raises(ValueError):
        T.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), stride=0)


# ---------------------------------------------------------------- linear / losses


def test_linear_identity_and_bias():
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(T.linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x)
    b = np.array([1.0, -2.0])
    out = T.linear(Tensor(x), Tensor(np.zeros((2, 3))), Tensor(b)).data
    np.testing.assert_array_equal(out, np.tile(b, (2, 1)))


def test_linear_shape_mismatch():
    with pytest.raises(ShapeError):
        T.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_cross_entropy_uniform_is_log_k(f64):
    loss = T.softmax_cross_entropy(Tensor(np.zeros((4, 10))), np.arange(4))
    assert loss.item() == pytest.approx(math.log(10), abs=1e-12)


def test_cross_entropy_large_margin(f64):
    logits = np.zeros((2, 5))
    logits[[0, 1], [3, 1]] = 1e3
    assert T.softmax_cross_entropy(Tensor(logits), np.array([3, 1])).item() == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_label_range():
    with pytest.raises(ValueError):
        T.softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))
    with pytest.raises(ValueError):
        T.softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([-1, 0]))


# ---------------------------------------------------------------- backward


def test_backward_sum_gives_ones(f64, rng):
    x = rng.standard_normal((3, 4))
    (g,) = grad_of(T.total, x)
    np.testing.assert_array_equal(g, np.ones_like(x))


def test_backward_half_square_gives_x(f64, rng):
    x = rng.standard_normal((2, 5))
    (g,) = grad_of(lambda t: T.mul(0.5, T.total(T.square(t))), x)
    np.testing.assert_allclose(g, x, rtol=0, atol=1e-15)


def test_shared_subexpression_accumulates(f64):
    x = np.array([1.0, 2.0, 3.0])
    # y = x*x used twice: loss = sum(y) + sum(y) -> grad 4x
    def fn(t):
        y = T.mul(t, t)
        return T.add(T.total(y), T.total(y))
    (g,) = grad_of(fn, x)
    np.testing.assert_allclose(g, 4 * x)


def test_backward_only_requested(f64):
    with Tape() as tape:
        a, b = Tensor(np.ones(2)), Tensor(np.full(2, 3.0))
        tape.watch(a, b)
        loss = T.total(T.mul(a, b))
    grads = backward(loss, [a])
    assert len(grads) == 1
    np.testing.assert_array_equal(grads[0], [3.0, 3.0])


def test_backward_errors(f64):
    with Tape() as tape:
        x = Tensor(np.ones(3))
        tape.watch(x)
        y = T.mul(x, x)
    with pytest.raises(TapeError):
        backward(y, [x])  # not scalar
    stranger = Tensor(np.ones(3))
    with pytest.raises(TapeError):
        backward(T.total(y), [stranger])
    with pytest.raises(TapeError):
        backward(T.total(Tensor(np.ones(3))), [x])  # loss not on a tape


def test_channel_broadcast_only():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))))
    out = T.add(Tensor(np.zeros((2, 3, 2, 2))), Tensor(np.arange(3.0)))
    np.testing.assert_array_equal(out.data[1, :, 1, 1], [0, 1, 2])


def test_repeat_runs_bit_identical(f64):
    def run():
        r = np.random.default_rng(7)
        x, w = r.standard_normal((2, 3, 6, 6)), r.standard_normal((4, 3, 3, 3))
        return grad_of(lambda a, b: T.mean_all(T.relu(T.conv2d(a, b, 1, 1))), x, w)
    a, b = run(), run()
    for u, v in zip(a, b):
        assert u.tobytes() == v.tobytes()


# ---------------------------------------------------------------- finite differences


def test_fd_sum_is_exact(f64, rng):
    assert finite_diff_check(T.total, Tensor(rng.standard_normal((3, 3)))) < 1e-9


def test_fd_negative_control(f64, rng):
    x = Tensor(rng.standard_normal((3, 4)))
    fn = lambda t: T.total(T.square(t))
    # a corrupted backward: returns x instead of 2x
    assert finite_diff_check(fn, x, grad_fn=lambda t: t.data.copy()) > 1e-2


SHAPES = [(2, 3, 5, 5), (1, 2, 6, 6), (3, 1, 4, 4)]


@pytest.mark.parametrize("shape", SHAPES)
def test_fd_conv_input_and_kernel(f64, shape):
    r = np.random.default_rng(sum(shape))
    n, c, h, w = shape
    x = Tensor(r.standard_normal(shape))
    k = Tensor(r.standard_normal((3, c, 3, 3)))
    proj = r.standard_normal((n, 3, (h + 2 - 3) // 2 + 1, (w + 2 - 3) // 2 + 1))
    assert finite_diff_check(lambda t: T.total(T.mul(T.conv2d(t, k, 2, 1), Tensor(proj))), x) < TOL
    assert finite_diff_check(lambda t: T.total(T.mul(T.conv2d(x, t, 2, 1), Tensor(proj))), k) < TOL


@pytest.mark.parametrize("shape", [(4, 6), (2, 3), (5, 1)])
def test_fd_linear(f64, shape):
    r = np.random.default_rng(shape[0])
    x = Tensor(r.standard_normal(shape))
    w = Tensor(r.standard_normal((3, shape[1])))
    b = Tensor(r.standard_normal(3))
    proj = Tensor(r.standard_normal((shape[0], 3)))
    for i, arg in enumerate((x, w, b)):
        def fn(t, i=i):
            args = [x, w, b]
            args[i] = t
            return T.total(T.mul(T.linear(*args), proj))
        assert finite_diff_check(fn, arg) < TOL


@pytest.mark.parametrize("shape", SHAPES)
def test_fd_relu_and_pooling(f64, shape):
    r = np.random.default_rng(3)
    x = r.standard_normal(shape)
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the relu kink
    p1 = Tensor(r.standard_normal(shape))
    assert finite_diff_check(lambda t: T.total(T.mul(T.relu(t), p1)), Tensor(x)) < TOL
    even = Tensor(r.standard_normal((shape[0], shape[1], 4, 4)))
    p2 = Tensor(r.standard_normal((shape[0], shape[1], 2, 2)))
    assert finite_diff_check(lambda t: T.total(T.mul(T.avg_pool2d(t, 2), p2)), even) < TOL
    p3 = Tensor(r.standard_normal((shape[0], shape[1])))
    assert finite_diff_check(lambda t: T.total(T.mul(T.global_avg_pool(t), p3)), Tensor(x)) < TOL
    p4 = Tensor(r.standard_normal((shape[0], shape[1], 8, 8)))
    assert finite_diff_check(lambda t: T.total(T.mul(T.upsample_nearest(t, 2), p4)), even) < TOL


@pytest.mark.parametrize("shape", [(3, 5), (8, 10), (1, 2)])
def test_fd_cross_entropy(f64, shape):
    r = np.random.default_rng(shape[1])
    logits = Tensor(r.standard_normal(shape))
    labels = r.integers(0, shape[1], shape[0])
    assert finite_diff_check(lambda t: T.softmax_cross_entropy(t, labels), logits) < TOL


@pytest.mark.parametrize("shape", SHAPES)
def test_fd_batch_norm_train(f64, shape):
    r = np.random.default_rng(11)
    c = shape[1]
    x = Tensor(r.standard_normal(shape))
    g = Tensor(r.uniform(0.5, 1.5, c))
    b = Tensor(r.standard_normal(c))
    proj = Tensor(r.standard_normal(shape))
    for i, arg in enumerate((x, g, b)):
        def fn(t, i=i):
            args = [x, g, b]
            args[i] = t
            return T.total(T.mul(T.batch_norm_train(*args, 1e-5)[0], proj))
        assert finite_diff_check(fn, arg) < TOL


def test_fd_elementwise_ops(f64, rng):
    a = Tensor(rng.uniform(0.5, 2.0, (2, 3, 2, 2)))
    b = Tensor(rng.uniform(0.5, 2.0, (2, 3, 2, 2)))
    v = Tensor(rng.uniform(0.5, 2.0, 3))
    for fn in (
        lambda t: T.total(T.div(T.sub(t, b), T.add(t, b))),
        lambda t: T.total(T.sqrt(T.mul(t, t))),
        lambda t: T.mean_all(T.neg(T.square(t))),
        lambda t: T.total(T.square(T.channel_mean(t))),
        lambda t: T.total(T.square(T.channel_affine(t, v, v))),
        lambda t: T.total(T.square(T.reshape(t, (2, 12)))),
        lambda t: T.mse_loss(t, b),
    ):
        assert finite_diff_check(fn, a) < TOL


def test_fd_composite_network(f64):
    r = np.random.default_rng(5)
    x = Tensor(r.standard_normal((3, 2, 6, 6)))
    w1 = Tensor(r.standard_normal((4, 2, 3, 3)) * 0.5)
    w2 = Tensor(r.standard_normal((5, 4)))
    labels = np.array([0, 4, 2])

    def net(k):
        h = T.relu(T.conv2d(x, k, 1, 1))
        return T.softmax_cross_entropy(T.linear(T.global_avg_pool(h), w2), labels)

    assert finite_diff_check(net, w1) < TOL
