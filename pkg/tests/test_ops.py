import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fbformer import ops
from fbformer.errors import ConfigError, ShapeError, UsageError
from fbformer.gradcheck import check_function
from fbformer.tensor import Parameter, Rng, Tensor, backward, no_grad, precision

TOL = 1e-4


def arr(*shape, seed=0):
    return Rng(seed).normal(shape)


# --- gradients ---------------------------------------------------------------

@pytest.mark.parametrize("fn, shapes", [
    (ops.add, [(2, 3), (3,)]),
    (ops.sub, [(2, 1, 3), (4, 1)]),
    (ops.mul, [(2, 3), (2, 3)]),
    (ops.div, [(2, 3), (1, 3)]),
    (ops.matmul, [(2, 3, 4), (4, 5)]),
    (lambda a, b: ops.concat([a, b], axis=1), [(2, 3), (2, 2)]),
])
def test_binary_grads(fn, shapes):
    inputs = [arr(*s, seed=i) for i, s in enumerate(shapes)]
    if fn is ops.div:
        inputs[1] = np.abs(inputs[1]) + 1.0
    assert max(check_function(fn, inputs)) < TOL


@pytest.mark.parametrize("fn", [
    ops.exp, ops.neg, ops.gelu,
    lambda a: ops.log(ops.exp(a) + 1.0),
    lambda a: ops.relu(a + 0.05),  # keep entries off the kink
    lambda a: ops.softmax(a, axis=-1),
    lambda a: ops.log_softmax(a, axis=1),
    lambda a: ops.sum(a, axis=(0, 2), keepdims=True),
    lambda a: ops.mean(a, axis=1),
    lambda a: ops.transpose(a, (2, 0, 1)),
    lambda a: ops.reshape(a, (6, 4)),
    lambda a: a[:, 1:, ::2],
    lambda a: ops.getitem(a, (np.array([0, 0, 1]), slice(None), np.array([3, 3, 0]))),
])
def test_unary_grads(fn):
    x = arr(2, 3, 4)
    assert max(check_function(fn, [x])) < TOL


def test_take_class_grad():
    target = np.array([[[0, 2], [1, 1]]])
    assert max(check_function(lambda a: ops.take_class(a, target), [arr(1, 3, 2, 2)])) < TOL


@pytest.mark.parametrize("stride, padding, groups", [(1, 1, 1), (2, 1, 1), (4, 2, 1), (1, 1, 4), (1, 0, 2)])
def test_conv2d_grads(stride, padding, groups):
    k = 3 if stride != 4 else 7
    x, w, b = arr(2, 4, 9, 9), arr(4, 4 // groups, k, k, seed=1), arr(4, seed=2)
    fn = lambda x, w, b: ops.conv2d(x, w, b, stride=stride, padding=padding, groups=groups)
    assert max(check_function(fn, [x, w, b])) < TOL


def test_conv2d_pointwise_grads():
    assert max(check_function(lambda x, w: ops.conv2d(x, w), [arr(2, 3, 4, 5), arr(6, 3, 1, 1, seed=1)])) < TOL


@pytest.mark.parametrize("heads", [1, 2])
def test_attention_grads(heads):
    q, k, v = arr(2, 5, 4), arr(2, 3, 4, seed=1), arr(2, 3, 4, seed=2)
    assert max(check_function(lambda q, k, v: ops.attention(q, k, v, heads), [q, k, v])) < TOL


def test_norm_grads():
    x, w, b = arr(2, 4, 3, 3), arr(4, seed=1), arr(4, seed=2)
    assert max(check_function(lambda x, w, b: ops.group_norm(x, 2, w, b), [x, w, b])) < TOL
    t, tw, tb = arr(2, 5, 6), arr(6, seed=3), arr(6, seed=4)
    assert max(check_function(lambda x, w, b: ops.layer_norm(x, w, b), [t, tw, tb])) < TOL


@pytest.mark.parametrize("fn", [
    lambda x: ops.resize_bilinear(x, 7, 5),
    lambda x: ops.resize_bilinear(x, 2, 3),
    lambda x: ops.upsample_nearest(x, 2),
    lambda x: ops.avg_pool(x, 2),
])
def test_resample_grads(fn):
    assert max(check_function(fn, [arr(1, 2, 4, 6)])) < TOL


# --- forward oracles ---------------------------------------------------------

@pytest.mark.parametrize("stride, padding, groups, k", [(1, 1, 1, 3), (2, 1, 1, 3), (4, 2, 1, 7), (1, 1, 6, 3),
                                                        (1, 0, 1, 1), (2, 0, 3, 2)])
def test_conv2d_matches_direct(stride, padding, groups, k):
    x, w, b = arr(2, 6, 11, 10), arr(6, 6 // groups, k, k, seed=1), arr(6, seed=2)
    with precision(np.float64):
        fast = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding, groups).data
    ref = ops.conv2d_direct(x, w, b, stride, padding, groups)
    np.testing.assert_allclose(fast, ref, rtol=1e-10, atol=1e-12)


def test_conv2d_direct_hand_value():
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    w = np.ones((1, 1, 2, 2))
    np.testing.assert_array_equal(ops.conv2d_direct(x, w)[0, 0], [[8, 12], [20, 24]])


def test_conv2d_errors():
    with pytest.raises(ConfigError):
        ops.conv2d(Tensor(arr(1, 3, 4, 4)), Tensor(arr(4, 3, 3, 3)), groups=2)
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(arr(1, 3, 4, 4)), Tensor(arr(4, 2, 3, 3)))


def test_attention_matches_naive():
    q, k, v = arr(1, 4, 6), arr(1, 3, 6, seed=1), arr(1, 3, 6, seed=2)
    with precision(np.float64):
        out = ops.attention(Tensor(q), Tensor(k), Tensor(v), heads=2).data
    ref = np.zeros_like(out)
    for h in range(2):
        sl = slice(3 * h, 3 * h + 3)
        s = q[0, :, sl] @ k[0, :, sl].T / math.sqrt(3)
        p = np.exp(s - s.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        ref[0, :, sl] = p @ v[0, :, sl]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_attention_heads_must_divide():
    x = Tensor(arr(1, 2, 6))
    with pytest.raises(ConfigError):
        ops.attention(x, x, x, heads=4)


def test_attention_uniform_when_keys_equal():
    q = Tensor(arr(1, 3, 4))
    k = Tensor(np.ones((1, 5, 4)))
    v = Tensor(arr(1, 5, 4, seed=3))
    out, w = ops.attention(q, k, v, heads=1, return_weights=True)
    np.testing.assert_allclose(w.data, 0.2, atol=1e-7)
    np.testing.assert_allclose(out.data[0], np.broadcast_to(v.data[0].mean(0), (3, 4)), atol=1e-6)


def test_layer_norm_statistics():
    with precision(np.float64):
        y = ops.layer_norm(Tensor(arr(3, 7) * 5 + 2), None, None).data
    np.testing.assert_allclose(y.mean(-1), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(-1), 1, atol=1e-4)


def test_group_norm_matches_numpy():
    x = arr(2, 6, 3, 3)
    with precision(np.float64):
        y = ops.group_norm(Tensor(x), 3, None, None).data
    g = x.reshape(2, 3, -1)
    ref = ((g - g.mean(-1, keepdims=True)) / np.sqrt(g.var(-1, keepdims=True) + ops.NORM_EPS)).reshape(x.shape)
    np.testing.assert_allclose(y, ref, atol=1e-12)


def test_bilinear_half_pixel_values():
    # 2 -> 4 upsampling with half-pixel centres: weights 1, .75/.25, .25/.75, 1
    m = ops.bilinear_matrix(2, 4)
    np.testing.assert_allclose(m, [[1, 0], [0.75, 0.25], [0.25, 0.75], [0, 1]])
    x = Tensor(np.array([[[[0.0, 4.0]]]]))
    np.testing.assert_allclose(ops.resize_bilinear(x, 1, 4).data[0, 0, 0], [0, 1, 3, 4])


def test_bilinear_downsample_by_two_is_pair_mean():
    x = arr(1, 1, 4, 4)
    with precision(np.float64):
        y = ops.resize_bilinear(Tensor(x), 2, 2).data
    np.testing.assert_allclose(y, ops.avg_pool(Tensor(x), 2).data, atol=1e-12)


def test_resize_identity_and_errors():
    x = Tensor(arr(1, 2, 3, 3))
    assert ops.resize_bilinear(x, 3, 3) is x
    with pytest.raises(ShapeError):
        ops.resize_bilinear(x, 0, 3)
    with pytest.raises(ShapeError):
        ops.avg_pool(x, 2)


def test_softmax_stable_for_large_logits():
    y = ops.softmax(Tensor(np.array([[1000.0, 1000.0, -1000.0]])), axis=-1).data
    np.testing.assert_allclose(y, [[0.5, 0.5, 0.0]])
    ls = ops.log_softmax(Tensor(np.array([[1000.0, 0.0]])), axis=-1).data
    assert np.all(np.isfinite(ls))


def test_gelu_exact_erf_form():
    x = np.array([-2.0, -0.5, 0.0, 1.0, 3.0])
    with precision(np.float64):
        y = ops.gelu(Tensor(x)).data
    ref = [0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in x]
    np.testing.assert_allclose(y, ref, rtol=1e-12)


# --- properties --------------------------------------------------------------

dims = st.integers(1, 4)


@settings(max_examples=30, deadline=None)
@given(n=dims, c=dims, h=st.integers(3, 9), w=st.integers(3, 9), k=st.sampled_from([1, 3]),
       stride=st.integers(1, 3), padding=st.integers(0, 2))
def test_conv_output_shape_algebra(n, c, h, w, k, stride, padding):
    x = Tensor(np.zeros((n, c, h, w)))
    weight = Tensor(np.zeros((2, c, k, k)))
    out = ops.conv2d(x, weight, stride=stride, padding=padding)
    assert out.shape == (n, 2, (h + 2 * padding - k) // stride + 1, (w + 2 * padding - k) // stride + 1)


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 1000))
def test_conv_is_linear_in_input(a, b, seed):
    rng = Rng(seed)
    x1, x2, w = rng.normal((1, 2, 5, 5)), rng.normal((1, 2, 5, 5)), rng.normal((3, 2, 3, 3))
    with precision(np.float64):
        conv = lambda x: ops.conv2d(Tensor(x), Tensor(w), padding=1).data
        np.testing.assert_allclose(conv(a * x1 + b * x2), a * conv(x1) + b * conv(x2), atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(h=st.integers(1, 8), w=st.integers(1, 8), oh=st.integers(1, 12), ow=st.integers(1, 12))
def test_bilinear_rows_are_convex_weights(h, w, oh, ow):
    for m in (ops.bilinear_matrix(h, oh), ops.bilinear_matrix(w, ow)):
        assert np.all(m >= 0)
        np.testing.assert_allclose(m.sum(1), 1.0)
    x = Tensor(np.full((1, 1, h, w), 3.5))
    np.testing.assert_allclose(ops.resize_bilinear(x, oh, ow).data, 3.5, rtol=1e-6)


@settings(max_examples=25, deadline=None)
@given(shape=st.lists(st.integers(1, 4), min_size=1, max_size=4), seed=st.integers(0, 100))
def test_softmax_sums_to_one(shape, seed):
    y = ops.softmax(Tensor(Rng(seed).normal(shape) * 10), axis=-1).data
    np.testing.assert_allclose(y.sum(-1), 1.0, rtol=1e-5)


@settings(max_examples=20, deadline=None)
@given(a=st.lists(st.integers(1, 3), min_size=1, max_size=3), seed=st.integers(0, 100))
def test_broadcast_add_grad_shapes(a, seed):
    x = Tensor(Rng(seed).normal(a), requires_grad=True)
    y = Tensor(Rng(seed + 1).normal([2] + [1] * len(a)), requires_grad=True)
    backward(ops.sum(x + y))
    assert x.grad.shape == x.shape and y.grad.shape == y.shape
    np.testing.assert_allclose(x.grad, 2.0)
    np.testing.assert_allclose(y.grad, np.prod(a))


# --- engine ------------------------------------------------------------------

def test_fan_out_accumulates():
    x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    backward(ops.sum(x * x + x))
    np.testing.assert_allclose(x.grad, [5.0, 7.0])


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(UsageError):
        backward(x * 2.0)


def test_deep_chain_has_no_recursion_limit():
    x = Tensor(np.ones(1), requires_grad=True)
    y = x
    for _ in range(5000):
        y = y + 1.0
    backward(ops.sum(y))
    assert x.grad[0] == 1.0


def test_no_grad_records_nothing():
    p = Parameter(np.ones(2))
    with no_grad():
        y = p * 3.0
    assert not y.requires_grad and y._parents == ()


def test_grads_accumulate_across_backward_calls():
    p = Parameter(np.ones(2))
    backward(ops.sum(p * 2.0))
    backward(ops.sum(p * 2.0))
    np.testing.assert_allclose(p.grad, 4.0)
    p.zero_grad()
    np.testing.assert_allclose(p.grad, 0.0)


def test_rng_deterministic_and_keyed():
    assert np.array_equal(Rng(5, 1).normal((4,)), Rng(5, 1).normal((4,)))
    assert not np.array_equal(Rng(5, 1).normal((4,)), Rng(5, 2).normal((4,)))
    assert np.array_equal(Rng(5).child(3).normal((4,)), Rng(5, 3).normal((4,)))
    t = Rng(0).trunc_normal((10000,), std=0.02)
    assert np.abs(t).max() <= 0.04 + 1e-12


def test_count_macs_tallies_conv():
    with ops.count_macs() as tally:
        ops.conv2d(Tensor(np.zeros((1, 3, 8, 8))), Tensor(np.zeros((4, 3, 3, 3))), padding=1)
    assert sum(tally.values()) == 4 * 3 * 9 * 64


def test_rel_error_zero_gradient_and_scale():
    from fbformer.gradcheck import rel_error
    assert rel_error(np.full(3, 1e-17), np.zeros(3)) < 1e-6  # both are round-off around an exact zero
    assert rel_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert rel_error(np.array([1.0]), np.array([-1.0])) == pytest.approx(2.0)
