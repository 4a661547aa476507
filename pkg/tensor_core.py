'''
Dense float64 tensor arithmetic shared by every other module.

A Tensor is a C-contiguous float64 numpy array. Operations here never mutate
their inputs.
'''

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import ArgumentError, ShapeError

Tensor = np.ndarray

ELEMENTWISE_OPS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
    "max": np.maximum,
    "sqrt": np.sqrt,
    "square": np.square,
}
UNARY_OPS = {"sqrt", "square"}


def tensor(data, shape=None):
    """
    Build a Tensor from nested sequences or a flat sequence plus a shape.

    Args:
        data: Values in row-major order.
        shape: Optional extents; product(shape) must equal len(data).

    Returns:
        float64 ndarray
    """
    arr = np.array(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != arr.size:
            raise ShapeError(f"shape {shape} does not hold {arr.size} values")
        arr = arr.reshape(shape)
    return np.ascontiguousarray(arr)


def _normalize_axes(t, axes):
    axes = (axes,) if isinstance(axes, int) else tuple(axes)
    out = []
    for axis in axes:
        if not -t.ndim <= axis < t.ndim:
            raise ShapeError(f"axis {axis} out of range for rank {t.ndim}")
        out.append(axis % t.ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axis in {axes}")
    return tuple(sorted(out))


def reduce_mean_over(t, axes):
    """
    Arithmetic mean over the given axes, keeping them with extent 1.

    Args:
        t: Input tensor.
        axes: Axis index or iterable of indices.

    Returns:
        Tensor with extent 1 along every reduced axis.
    """
    return np.mean(t, axis=_normalize_axes(t, axes), keepdims=True)


def check_broadcast(a, b):
    '''Only size-1 stretching is allowed; ranks must match.'''
    if a.ndim != b.ndim:
        raise ShapeError(f"rank mismatch {a.shape} vs {b.shape}")
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}")


def elementwise(op, a, b=None):
    """
    Apply an element-wise operation with size-1 broadcasting.

    Division by zero yields +-inf; callers guard with an epsilon.

    Args:
        op: One of add, sub, mul, div, sqrt, max, square.
        a: First operand.
        b: Second operand (binary ops only).

    Returns:
        Result tensor
    """
    if op not in ELEMENTWISE_OPS:
        raise ArgumentError(f"unknown element-wise op {op!r}")
    fn = ELEMENTWISE_OPS[op]
    a = np.asarray(a, dtype=np.float64)
    if op in UNARY_OPS:
        return fn(a)
    if b is None:
        raise ArgumentError(f"{op} needs two operands")
    b = np.asarray(b, dtype=np.float64)
    check_broadcast(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        return fn(a, b)


def conv_output_size(size, kernel, stride, padding):
    out = (size + 2 * padding - kernel) // stride + 1
    if stride < 1 or out < 1:
        raise ShapeError(
            f"extent {size} with kernel {kernel}, stride {stride}, padding {padding} gives no output"
        )
    return out


def im2col(x, kernel, stride=1, padding=0):
    """
    Unfold every receptive field of an N x C x H x W input into a row.

    Args:
        x: Input tensor N x C x H x W.
        kernel: (K_h, K_w).
        stride: Spatial stride.
        padding: Zero padding on every side.

    Returns:
        cols: (N * H_out * W_out) x (C * K_h * K_w), rows ordered (n, h_out, w_out)
        out_hw: (H_out, W_out)
    """
    if x.ndim != 4:
        raise ShapeError(f"expected N x C x H x W input, got {x.shape}")
    n, c, h, w = x.shape
    kh, kw = kernel
    h_out = conv_output_size(h, kh, stride, padding)
    w_out = conv_output_size(w, kw, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, : (h_out - 1) * stride + 1 : stride, : (w_out - 1) * stride + 1 : stride]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h_out * w_out, c * kh * kw)
    return np.ascontiguousarray(cols), (h_out, w_out)


def col2im(grad_cols, x_shape, kernel, stride=1, padding=0):
    '''Scatter-add unfolded gradients back onto the input grid (inverse of im2col).'''
    n, c, h, w = x_shape
    kh, kw = kernel
    h_out = conv_output_size(h, kh, stride, padding)
    w_out = conv_output_size(w, kw, stride, padding)
    g = grad_cols.reshape(n, h_out, w_out, c, kh, kw)
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += (
                g[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return dxp[:, :, padding : padding + h, padding : padding + w]


def _check_conv(x, weight):
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d needs 4-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, weight expects {weight.shape[1]}")


def conv2d_forward(x, weight, stride=1, padding=0):
    """
    Cross-correlation with zero padding (no kernel flip).

    Args:
        x: N x C_in x H x W.
        weight: C_out x C_in x K_h x K_w.
        stride: Spatial stride.
        padding: Zero padding.

    Returns:
        N x C_out x H_out x W_out
    """
    return conv2d_forward_cols(x, weight, stride, padding)[0]


def conv2d_forward_cols(x, weight, stride=1, padding=0):
    '''conv2d_forward that also returns the im2col matrix of x, for reuse in backward.'''
    _check_conv(x, weight)
    cols, (h_out, w_out) = im2col(x, weight.shape[2:], stride, padding)
    out = cols @ weight.reshape(weight.shape[0], -1).T
    return np.ascontiguousarray(out.reshape(x.shape[0], h_out, w_out, -1).transpose(0, 3, 1, 2)), cols


def conv2d_backward(x, weight, grad_out, stride=1, padding=0, cols=None):
    """
    Gradients of conv2d_forward.

    `cols` is the im2col matrix of x from the forward pass; it is recomputed
    when not given.

    Returns:
        (grad_x, grad_weight)
    """
    _check_conv(x, weight)
    if cols is None:
        cols, _ = im2col(x, weight.shape[2:], stride, padding)
    c_out = weight.shape[0]
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, c_out)
    grad_weight = (g.T @ cols).reshape(weight.shape)
    grad_cols = g @ weight.reshape(c_out, -1)
    grad_x = col2im(grad_cols, x.shape, weight.shape[2:], stride, padding)
    return np.ascontiguousarray(grad_x), grad_weight


class Rng:
    """
    Seeded random stream on numpy's PCG64 bit generator.

    The whole state round-trips through `state` so checkpoints resume the
    exact stream.
    """

    def __init__(self, seed):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    @property
    def state(self):
        return self._gen.bit_generator.state

    @state.setter
    def state(self, value):
        self._gen.bit_generator.state = value

    def normal(self, shape, scale=1.0):
        return self._gen.normal(0.0, scale, size=shape)

    def uniform(self, shape, low=0.0, high=1.0):
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low, high, shape=None):
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n):
        return self._gen.permutation(n)

    def spawn(self, offset):
        '''Independent child stream derived from the seed.'''
        return Rng(self.seed * 1_000_003 + offset)
