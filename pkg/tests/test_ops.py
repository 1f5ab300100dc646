import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fluff import gradcheck, ops, reference
from fluff.ops import ConvParams


def _conv(rng, c_in, c_out, k=3, dilation=1, padding=None, stride=1, bias=True, dtype=np.float32):
    w = rng.standard_normal((c_out, c_in, k, k)).astype(dtype)
    b = rng.standard_normal(c_out).astype(dtype) if bias else np.zeros(c_out, dtype)
    return ConvParams(w, b, stride=stride, padding=dilation if padding is None else padding, dilation=dilation)


def test_effective_extent():
    assert ops.effective_extent(3, 6) == 13
    assert ops.effective_extent(3, 1) == 3
    assert ops.conv_output_size(38, 3, 1, 6, 6) == 38


def test_identity_kernel_preserves_input():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 9, 9)).astype(np.float32)
    for d in range(1, 7):
        w = np.zeros((3, 3, 3, 3), np.float32)
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        out = ops.conv2d_forward(x, ConvParams(w, np.zeros(3, np.float32), padding=d, dilation=d))
        np.testing.assert_array_equal(out, x)


def test_dilation_three_matches_zero_inserted_seven_by_seven():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 11, 11)).astype(np.float32)
    p = _conv(rng, 2, 3, dilation=3)
    k7 = reference.zero_insert_kernel(p.weight, 3)
    assert k7.shape == (3, 2, 7, 7)
    assert np.count_nonzero(k7[:, :, 1::3, :]) == 0 and np.count_nonzero(k7[:, :, :, 1::3]) == 0
    ref = reference.conv2d_shift_sum(x, k7, p.bias, padding=3)
    assert np.abs(ops.conv2d_forward(x, p) - ref).max() < 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 2))
def test_dilated_conv_equals_zero_insertion_property(seed, d, stride):
    rng = np.random.default_rng(seed)
    b, c, oc = int(rng.integers(1, 3)), int(rng.integers(1, 9)), int(rng.integers(1, 5))
    h = int(rng.integers(1, 17))
    pad = int(rng.integers(0, d + 1))
    if h + 2 * pad < 2 * d + 1:
        h = 2 * d + 1
    x = rng.standard_normal((b, c, h, h)).astype(np.float32)
    p = _conv(rng, c, oc, dilation=d, padding=pad, stride=stride)
    got = ops.conv2d_forward(x, p)
    ref = reference.dilated_conv_via_zero_insertion(x, p.weight, p.bias, pad, d)[:, :, ::stride, ::stride]
    assert got.shape == ref.shape
    assert np.abs(got - ref).max() <= 1e-6


def test_dilation_one_equals_naive_loop_bit_for_bit():
    rng = np.random.default_rng(2)
    for _ in range(5):
        x = rng.standard_normal((2, 3, 7, 6)).astype(np.float32)
        p = _conv(rng, 3, 4, padding=int(rng.integers(0, 2)), stride=int(rng.integers(1, 3)))
        got = ops.conv2d_forward(x, p)
        ref = reference.conv2d_naive(x, p.weight, p.bias, p.stride, p.padding, 1)
        assert got.tobytes() == ref.tobytes()


def test_naive_reference_handles_dilation():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 2, 9, 9)).astype(np.float32)
    p = _conv(rng, 2, 2, dilation=2)
    ref = reference.conv2d_naive(x, p.weight, p.bias, 1, 2, 2)
    assert np.abs(ops.conv2d_forward(x, p) - ref).max() < 1e-6


def test_conv_linearity_without_bias():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    p = _conv(rng, 3, 5, dilation=2, bias=False)
    np.testing.assert_allclose(ops.conv2d_forward(2.5 * x, p), 2.5 * ops.conv2d_forward(x, p), atol=1e-5)


def test_conv_errors():
    rng = np.random.default_rng(5)
    p = _conv(rng, 3, 2, dilation=6, padding=0)
    with pytest.raises(ValueError, match="channel"):
        ops.conv2d_forward(np.zeros((1, 2, 20, 20), np.float32), p)
    with pytest.raises(ValueError):
        ops.conv2d_forward(np.zeros((1, 3, 5, 5), np.float32), p)  # negative output size
    x = np.zeros((1, 3, 20, 20), np.float32)
    with pytest.raises(ValueError, match="grad_out"):
        ops.conv2d_backward(x, p, np.zeros((1, 2, 3, 3), np.float32))


def test_conv_bias_gradient_is_channel_sum():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
    p = _conv(rng, 3, 4, dilation=2)
    g = rng.standard_normal((2, 4, 6, 6)).astype(np.float32)
    _, _, gb = ops.conv2d_backward(x, p, g)
    np.testing.assert_allclose(gb, g.astype(np.float64).sum(axis=(0, 2, 3)), rtol=1e-6)


def test_conv_zero_grad_out_gives_zero_gradients():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
    p = _conv(rng, 2, 3, dilation=2)
    for g in ops.conv2d_backward(x, p, np.zeros((1, 3, 5, 5), np.float32)):
        assert not np.any(g)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_conv_backward_finite_differences_small_case(dtype):
    res = gradcheck.check_conv(np.random.default_rng(8), dtype, shape=(1, 2, 5, 5), dilation=2)
    assert all(r.passed for r in res), [r.line() for r in res]


def test_conv_backward_strided_finite_differences():
    res = gradcheck.check_conv(np.random.default_rng(9), np.float64, shape=(2, 2, 7, 7), dilation=1, stride=2)
    assert all(r.passed for r in res), [r.line() for r in res]


def test_conv_cache_reuse_gives_same_gradients():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
    p = _conv(rng, 3, 2, dilation=3)
    cache = {}
    out = ops.conv2d_forward(x, p, cache=cache)
    g = np.ones_like(out)
    for a, b in zip(ops.conv2d_backward(x, p, g, cache=cache), ops.conv2d_backward(x, p, g)):
        np.testing.assert_array_equal(a, b)


def test_one_by_one_conv_is_channel_matmul():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((2, 5, 4, 3)).astype(np.float32)
    p = _conv(rng, 5, 3, k=1, padding=0)
    ref = np.einsum("oc,bchw->bohw", p.weight[:, :, 0, 0].astype(np.float64), x) + p.bias[None, :, None, None]
    np.testing.assert_allclose(ops.conv2d_forward(x, p), ref, atol=1e-5)


def test_relu_examples():
    x = np.array([-1.0, 0.0, 2.0], np.float32).reshape(1, 1, 1, 3)
    assert ops.relu_forward(x).ravel().tolist() == [0.0, 0.0, 2.0]
    neg = -np.abs(np.random.default_rng(0).standard_normal((1, 2, 3, 3))).astype(np.float32) - 0.1
    assert not np.any(ops.relu_forward(neg))
    assert not np.any(ops.relu_backward(neg, np.ones_like(neg)))
    pos = -neg
    g = np.random.default_rng(1).standard_normal(pos.shape).astype(np.float32)
    np.testing.assert_array_equal(ops.relu_backward(pos, g), g)


def test_concat_twelve_quarter_inputs_gives_three_times_channels():
    c_pre = 64
    xs = [np.zeros((1, c_pre // 4, 5, 5), np.float32) for _ in range(12)]
    assert ops.concat_channels(xs).shape == (1, 3 * c_pre, 5, 5)


def test_concat_single_input_and_round_trip():
    rng = np.random.default_rng(12)
    x = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
    np.testing.assert_array_equal(ops.concat_channels([x]), x)
    xs = [rng.standard_normal((2, c, 4, 4)).astype(np.float32) for c in (1, 3, 2)]
    cat = ops.concat_channels(xs)
    start = 0
    for x in xs:
        np.testing.assert_array_equal(cat[:, start:start + x.shape[1]], x)
        start += x.shape[1]
    for a, b in zip(ops.concat_backward(cat, [1, 3, 2]), xs):
        np.testing.assert_array_equal(a, b)


def test_concat_mismatch_raises():
    with pytest.raises(ValueError):
        ops.concat_channels([np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 5, 4))])
    with pytest.raises(ValueError):
        ops.concat_channels([np.zeros((1, 1, 4, 4)), np.zeros((2, 1, 4, 4))])


def test_add_and_its_errors():
    x = np.random.default_rng(13).standard_normal((1, 2, 3, 3)).astype(np.float32)
    np.testing.assert_array_equal(ops.add_forward(x, np.zeros_like(x)), x)
    with pytest.raises(ValueError):
        ops.add_forward(x, np.zeros((1, 2, 3, 4), np.float32))


def test_pooling_examples():
    const = np.full((1, 2, 7, 7), 3.25, np.float32)
    for d in (1, 2, 3):
        k = 2 * d + 1
        np.testing.assert_array_equal(ops.maxpool2d_forward(const, k, 1, d), const)
        np.testing.assert_allclose(ops.avgpool2d_forward(const, k, 1, d), const, rtol=1e-7)
    ones = np.ones((1, 1, 5, 5), np.float32)
    out = ops.avgpool2d_forward(ones, 3, 1, 0)
    assert out.shape == (1, 1, 3, 3) and np.all(out == 1.0)


def test_avgpool_excludes_padded_cells():
    x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    out = ops.avgpool2d_forward(x, 3, 1, 1)
    assert out[0, 0, 0, 0] == pytest.approx(np.mean([0, 1, 4, 5]))
    assert out[0, 0, 1, 1] == pytest.approx(np.mean(x[0, 0, :3, :3]))


def test_maxpool_backward_routes_to_argmax():
    x = np.array([[1, 5, 2], [0, 3, 4], [7, 1, 1]], np.float32).reshape(1, 1, 3, 3)
    g = ops.maxpool2d_backward(x, np.ones((1, 1, 1, 1), np.float32), 3, 1, 0)
    expected = np.zeros((3, 3), np.float32)
    expected[2, 0] = 1
    np.testing.assert_array_equal(g[0, 0], expected)


def test_pool_same_size_for_dilated_extent():
    x = np.random.default_rng(14).standard_normal((1, 2, 10, 10)).astype(np.float32)
    for d in range(1, 5):
        assert ops.maxpool2d_forward(x, 2 * d + 1, 1, d).shape == x.shape
        assert ops.avgpool2d_forward(x, 2 * d + 1, 1, d).shape == x.shape


def test_pool_rejects_padding_as_large_as_window():
    with pytest.raises(ValueError):
        ops.maxpool2d_forward(np.zeros((1, 1, 4, 4), np.float32), 3, 1, 3)


@pytest.mark.parametrize("check", ["relu", "maxpool", "avgpool", "concat", "add"])
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_elementwise_and_pool_gradients(check, dtype):
    rng = np.random.default_rng(15)
    for _ in range(3):
        res = gradcheck.OP_CHECKS[check](rng, dtype)
        assert all(r.passed for r in res), [r.line() for r in res]


def test_empty_tensors_flow_through():
    rng = np.random.default_rng(16)
    x = np.zeros((0, 2, 6, 6), np.float32)
    p = _conv(rng, 2, 3, dilation=2)
    out = ops.conv2d_forward(x, p)
    assert out.shape == (0, 3, 6, 6)
    gx, gw, gb = ops.conv2d_backward(x, p, out)
    assert gx.shape == x.shape and not np.any(gw) and not np.any(gb)
    assert ops.relu_forward(x).shape == x.shape
    assert ops.maxpool2d_forward(x, 3, 1, 1).shape == x.shape
    assert ops.avgpool2d_forward(x, 3, 1, 1).shape == x.shape
    assert ops.concat_channels([x, x]).shape == (0, 4, 6, 6)


def test_ops_do_not_mutate_inputs():
    rng = np.random.default_rng(17)
    x = rng.standard_normal((1, 2, 6, 6)).astype(np.float32)
    p = _conv(rng, 2, 2, dilation=2)
    g = rng.standard_normal((1, 2, 6, 6)).astype(np.float32)
    snap = [a.copy() for a in (x, p.weight, p.bias, g)]
    ops.conv2d_forward(x, p)
    ops.conv2d_backward(x, p, g)
    ops.relu_backward(x, g)
    ops.maxpool2d_backward(x, g, 3, 1, 1)
    ops.avgpool2d_backward(x, g, 3, 1, 1)
    for a, b in zip((x, p.weight, p.bias, g), snap):
        np.testing.assert_array_equal(a, b)
