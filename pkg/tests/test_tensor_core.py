import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from errors import ArgumentError, ShapeError
from oracles import finite_diff
from tensor_core import (
    Rng,
    conv2d_backward,
    conv2d_forward,
    conv2d_forward_cols,
    elementwise,
    im2col,
    reduce_mean_over,
    tensor,
)


def loop_conv(x, w, stride=1, padding=0):
    n, c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, c_out, h_out, w_out))
    for i in range(n):
        for o in range(c_out):
            for r in range(h_out):
                for c in range(w_out):
                    patch = xp[i, :, r * stride : r * stride + kh, c * stride : c * stride + kw]
                    out[i, o, r, c] = np.sum(patch * w[o])
    return out


def test_tensor_shape_check():
    assert tensor([1, 2, 3, 4], (2, 2)).shape == (2, 2)
    with pytest.raises(ShapeError):
        tensor([1, 2, 3], (2, 2))


def test_reduce_mean_simple():
    assert_array_equal(reduce_mean_over(tensor([1, 3], (2, 1)), {0}).ravel(), [2.0])
    assert_array_equal(reduce_mean_over(tensor([5], (1, 1)), {0}).ravel(), [5.0])


def test_reduce_mean_matches_loop():
    t = Rng(3).normal((2, 2, 2))
    out = reduce_mean_over(t, (0, 2))
    assert out.shape == (1, 2, 1)
    for j in range(2):
        expected = sum(t[i, j, k] for i in range(2) for k in range(2)) / 4
        assert out[0, j, 0] == pytest.approx(expected, abs=1e-15)


def test_reduce_mean_bad_axis():
    with pytest.raises(ShapeError):
        reduce_mean_over(np.zeros((2, 2)), (2,))


def test_conv_scalar_and_identity():
    out = conv2d_forward(tensor([2], (1, 1, 1, 1)), tensor([3], (1, 1, 1, 1)))
    assert_array_equal(out, [[[[6.0]]]])
    x = Rng(0).normal((2, 3, 4, 4))
    identity = np.zeros((3, 3, 1, 1))
    identity[np.arange(3), np.arange(3)] = 1.0
    assert_array_equal(conv2d_forward(x, identity), x)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv_matches_loop(stride, padding):
    rng = Rng(1)
    x = rng.normal((2, 2, 5, 5))
    w = rng.normal((3, 2, 2, 2))
    assert_allclose(conv2d_forward(x, w, stride, padding), loop_conv(x, w, stride, padding), atol=1e-12)


def test_conv_shape_errors():
    with pytest.raises(ShapeError):
        conv2d_forward(np.zeros((1, 2, 3, 3)), np.zeros((1, 3, 1, 1)))
    with pytest.raises(ShapeError):
        conv2d_forward(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)))


def test_im2col_rows():
    x = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3)
    cols, hw = im2col(x, (2, 2))
    assert hw == (2, 2)
    assert_array_equal(cols[0], [0, 1, 3, 4])
    assert_array_equal(cols[3], [4, 5, 7, 8])


def test_conv_backward_matches_finite_differences():
    rng = Rng(2)
    x = rng.normal((2, 2, 4, 4))
    w = rng.normal((2, 2, 3, 3))
    g = rng.normal((2, 2, 2, 2))
    grad_x, grad_w = conv2d_backward(x, w, g, stride=2, padding=1)
    num_w = finite_diff(lambda th: np.sum(conv2d_forward(x, th, 2, 1) * g), w)
    num_x = finite_diff(lambda xx: np.sum(conv2d_forward(xx, w, 2, 1) * g), x)
    assert_allclose(grad_w, num_w, rtol=1e-6, atol=1e-8)
    assert_allclose(grad_x, num_x, rtol=1e-6, atol=1e-8)


def test_elementwise_examples():
    assert_array_equal(elementwise("max", [0.5], [1.0]), [1.0])
    assert_array_equal(elementwise("sqrt", [4.0]), [2.0])
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[10.0, 20.0]])
    out = elementwise("add", a, b)
    for i in range(2):
        for j in range(2):
            assert out[i, j] == a[i, j] + b[0, j]


def test_elementwise_div_by_zero_is_inf():
    assert np.isinf(elementwise("div", [1.0], [0.0])[0])


def test_elementwise_rejects_rank_promotion():
    with pytest.raises(ShapeError):
        elementwise("add", np.zeros((2, 2)), np.zeros(2))
    with pytest.raises(ArgumentError):
        elementwise("pow", [1.0], [2.0])


def test_rng_state_round_trip():
    rng = Rng(11)
    rng.normal(5)
    saved = rng.state
    first = rng.normal(4)
    rng.state = saved
    assert_array_equal(rng.normal(4), first)
    assert_array_equal(Rng(11).permutation(10), Rng(11).permutation(10))


def test_subtracting_reduced_mean_centres_channels():
    t = Rng(8).normal((4, 3, 5, 5), 10.0) + 7.0
    centred = elementwise("sub", t, reduce_mean_over(t, (0, 2, 3)))
    assert np.abs(reduce_mean_over(centred, (0, 2, 3))).max() <= 1e-12


def test_conv_backward_reuses_forward_columns():
    rng = Rng(9)
    x = rng.normal((2, 3, 6, 6))
    w = rng.normal((4, 3, 3, 3))
    out, cols = conv2d_forward_cols(x, w, 2, 1)
    assert_array_equal(out, conv2d_forward(x, w, 2, 1))
    assert_array_equal(cols, im2col(x, (3, 3), 2, 1)[0])
    grad = rng.normal(out.shape)
    for a, b in zip(conv2d_backward(x, w, grad, 2, 1, cols=cols), conv2d_backward(x, w, grad, 2, 1)):
        assert_array_equal(a, b)


def test_rng_seed_42_stream_is_identical_across_processes():
    import subprocess
    import sys
    from pathlib import Path

    script = "import sys; from tensor_core import Rng; sys.stdout.buffer.write(Rng(42).normal(256).tobytes())"
    root = Path(__file__).resolve().parent.parent
    runs = [subprocess.run([sys.executable, "-c", script], cwd=root, capture_output=True, check=True).stdout
            for _ in range(2)]
    assert runs[0] == runs[1] == Rng(42).normal(256).tobytes()
