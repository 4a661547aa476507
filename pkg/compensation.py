'''
Closed-form statistic gradients, first-order Taylor compensation of past
statistics, and aggregation with the validity clamp.

For a layer x = conv(y, theta) with per-channel statistics
mu_j = mean_i x_ij and nu_j = mean_i x_ij^2, the Jacobians d mu / d theta and
d nu / d theta are block diagonal in the output channel: entry (j, q, p, eta)
vanishes for j != q. Only the diagonal blocks are ever built here.
'''

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

import config
from errors import ArgumentError, ShapeError, StateError
from tensor_core import conv_output_size, im2col


@dataclass(frozen=True)
class LayerGeometry:
    """
    Geometry of the parameterized layer bound to a normalizer.

    Fully-connected layers use kernel (1, 1) on a 1 x 1 spatial grid.
    """

    kernel: tuple = (1, 1)
    stride: int = 1
    padding: int = 0

    def output_hw(self, h, w):
        return (
            conv_output_size(h, self.kernel[0], self.stride, self.padding),
            conv_output_size(w, self.kernel[1], self.stride, self.padding),
        )


@dataclass
class IterationRecord:
    """
    Statistics of one past iteration of a single normalizer layer.

    g_mu is the shared diagonal block of d mu / d theta (C_in x K_h x K_w);
    g_nu holds one block per output channel (C_out x C_in x K_h x K_w).
    Naive CBN records carry no gradients and no weight snapshot.
    """

    iteration: int
    mu: np.ndarray
    nu: np.ndarray
    g_mu: Optional[np.ndarray] = None
    g_nu: Optional[np.ndarray] = None
    theta: Optional[np.ndarray] = None

    @property
    def compensable(self):
        return self.theta is not None


@dataclass
class AggregatedStats:
    """
    Window statistics. `clamped[tau, j]` is True where max(nu, mu^2) picked mu^2;
    row 0 is the current iteration.
    """

    mu: np.ndarray
    nu: np.ndarray
    sigma: np.ndarray
    clamped: np.ndarray
    var: np.ndarray


def as_conv_input(y):
    '''View a fully-connected input N x C as N x C x 1 x 1.'''
    if y.ndim == 2:
        return y.reshape(y.shape[0], y.shape[1], 1, 1)
    if y.ndim != 4:
        raise ShapeError(f"expected N x C or N x C x H x W, got {y.shape}")
    return y


def as_conv_weight(theta):
    '''View a fully-connected weight C_out x C_in as C_out x C_in x 1 x 1.'''
    if theta.ndim == 2:
        return theta.reshape(theta.shape[0], theta.shape[1], 1, 1)
    if theta.ndim != 4:
        raise ShapeError(f"expected 2-d or 4-d weight, got {theta.shape}")
    return theta


def _unfold(y_prev, geometry, cols=None):
    y_prev = as_conv_input(y_prev)
    k = y_prev.shape[1] * geometry.kernel[0] * geometry.kernel[1]
    if cols is None:
        cols, _ = im2col(y_prev, geometry.kernel, geometry.stride, geometry.padding)
    else:
        h_out, w_out = geometry.output_hw(*y_prev.shape[2:])
        if cols.shape != (y_prev.shape[0] * h_out * w_out, k):
            raise ShapeError(f"unfolded input {cols.shape} does not match {y_prev.shape} / {geometry}")
    return cols


def stat_grad_mu(y_prev, geometry, cols=None):
    """
    Shared diagonal block of d mu / d theta.

    Entry (p, eta) is the mean over all output positions i of
    y[i + offset(eta), p], with zero for padded positions. Cost is
    O(m * C_in * K); nothing of size C_out x C_out is formed.

    Args:
        y_prev: Input of the bound layer, N x C_in x H x W (or N x C_in).
        geometry: LayerGeometry of the bound layer.
        cols: im2col matrix of y_prev, when the caller already has it.

    Returns:
        C_in x K_h x K_w tensor
    """
    y_prev = as_conv_input(y_prev)
    cols = _unfold(y_prev, geometry, cols)
    return cols.mean(axis=0).reshape(y_prev.shape[1], *geometry.kernel)


def stat_grad_nu(y_prev, theta, geometry, x, cols=None):
    """
    Diagonal blocks of d nu / d theta.

    d nu_j / d theta_{j,p,eta} = (2/m) * sum_i x_{i,j} * y[i + offset(eta), p]

    Args:
        y_prev: Input of the bound layer.
        theta: Weights of the bound layer (shape check only).
        geometry: LayerGeometry of the bound layer.
        x: Bound layer output N x C_out x H_out x W_out (or N x C_out).
        cols: im2col matrix of y_prev, when the caller already has it.

    Returns:
        C_out x C_in x K_h x K_w tensor
    """
    y_prev = as_conv_input(y_prev)
    theta4 = as_conv_weight(theta)
    x4 = as_conv_input(x)
    c_out, c_in = theta4.shape[:2]
    if y_prev.shape[1] != c_in or tuple(theta4.shape[2:]) != tuple(geometry.kernel):
        raise ShapeError(f"weight {theta.shape} does not match input {y_prev.shape} / {geometry}")
    h_out, w_out = geometry.output_hw(*y_prev.shape[2:])
    if x4.shape != (y_prev.shape[0], c_out, h_out, w_out):
        raise ShapeError(f"layer output {x.shape} does not match weight {theta.shape}")
    cols = _unfold(y_prev, geometry, cols)
    x_mat = x4.transpose(0, 2, 3, 1).reshape(-1, c_out)
    m = x_mat.shape[0]
    return ((2.0 / m) * (x_mat.T @ cols)).reshape(theta4.shape)


def stat_grads(y_prev, theta, geometry, x, cols=None):
    '''Both statistic gradients for one iteration from a single unfold of y_prev.'''
    cols = _unfold(y_prev, geometry, cols)
    return stat_grad_mu(y_prev, geometry, cols), stat_grad_nu(y_prev, theta, geometry, x, cols)


def compensate(record, theta):
    """
    First-order Taylor estimate of a past iteration's statistics under the
    current weights of the bound layer.

    Args:
        record: IterationRecord with gradients and a weight snapshot.
        theta: Current weights of the bound layer.

    Returns:
        (mu_comp, nu_comp), each of length C_out
    """
    if not record.compensable:
        raise StateError("record carries no statistic gradients")
    if theta.shape != record.theta.shape:
        raise StateError(
            f"weights {theta.shape} do not match recorded {record.theta.shape}; layer was rebound"
        )
    delta = (theta - record.theta).reshape(theta.shape[0], -1)
    mu_comp = record.mu + delta @ record.g_mu.ravel()
    nu_comp = record.nu + np.sum(record.g_nu.reshape(theta.shape[0], -1) * delta, axis=1)
    return mu_comp, nu_comp


def aggregate(current, compensated):
    """
    Average statistics over the window with the per-iteration validity clamp.

    mu_bar = mean of all mu; nu_bar = mean of max(nu, mu^2);
    sigma_bar = sqrt(nu_bar - mu_bar^2).

    Args:
        current: (mu_t, nu_t) of the current iteration.
        compensated: Sequence of (mu, nu) for past iterations, most recent first.

    Returns:
        AggregatedStats
    """
    mus = np.stack([current[0]] + [c[0] for c in compensated])
    nus = np.stack([current[1]] + [c[1] for c in compensated])
    squares = mus * mus
    # ties keep nu
    clamped = squares > nus
    valid = np.where(clamped, squares, nus)
    mu_bar = mus.mean(axis=0)
    nu_bar = valid.mean(axis=0)
    # mean of max(nu, mu^2) >= mean(mu)^2 holds exactly; rounding can leave -1ulp
    var = np.maximum(nu_bar - mu_bar * mu_bar, 0.0)
    return AggregatedStats(mu=mu_bar, nu=nu_bar, sigma=np.sqrt(var), clamped=clamped, var=var)


def effective_window(t, window, burn_in, stored):
    """
    Number of iterations aggregated at iteration t.

    Args:
        t: Optimizer steps taken so far.
        window: Configured k.
        burn_in: Burn-in length in iterations.
        stored: Records currently in the ring buffer.

    Returns:
        1 during burn-in, else min(window, 1 + stored)
    """
    if t < burn_in:
        return 1
    return min(window, 1 + stored)


def suggested_window(batch_size):
    '''k = min(ceil(SATURATION_EXAMPLES / bs), MAX_WINDOW).'''
    if batch_size < 1:
        raise ArgumentError(f"batch size must be >= 1, got {batch_size}")
    return min(math.ceil(config.SATURATION_EXAMPLES / batch_size), config.MAX_WINDOW)
