'''
Normalization layers: BN, Naive CBN and CBN behind one interface.

All three share the same normalization core. BN is the window-1 case, Naive
CBN aggregates stale statistics of recent iterations, and CBN first moves
those statistics to the current weights with a first-order Taylor step.
'''

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

import config
from compensation import (
    IterationRecord,
    aggregate,
    compensate,
    effective_window,
    stat_grads,
)
from errors import ArgumentError, ShapeError, StateError
from tensor_core import elementwise, reduce_mean_over

logger = logging.getLogger(__name__)

NORMALIZER_KINDS = ("bn", "naive-cbn", "cbn")


@dataclass
class AffineParams:
    gamma: np.ndarray
    beta: np.ndarray

    @classmethod
    def identity(cls, channels):
        return cls(gamma=np.ones(channels), beta=np.zeros(channels))


@dataclass
class BnConfig:
    """
    Settings of one normalization layer.

    Args:
        kind: bn, naive-cbn or cbn.
        eps: Added to the variance before the square root.
        momentum: Decay rho of the running statistics.
        window: Temporal window k (1 for bn).
        burn_in: Iterations during which the window is forced to 1.
        taylor_backprop: Backpropagate into the bound weights through the
            Taylor terms of past iterations.
    """

    kind: str = "bn"
    eps: float = config.EPS
    momentum: float = config.RUNNING_DECAY
    window: int = 1
    burn_in: int = 0
    taylor_backprop: bool = config.TAYLOR_BACKPROP

    def __post_init__(self):
        if self.kind not in NORMALIZER_KINDS:
            raise ArgumentError(f"unknown normalizer kind {self.kind!r}")
        if not self.eps > 0:
            raise ArgumentError(f"eps must be positive, got {self.eps}")
        if not 0 < self.momentum < 1:
            raise ArgumentError(f"momentum must lie in (0, 1), got {self.momentum}")
        if self.window < 1:
            raise ArgumentError(f"window must be >= 1, got {self.window}")
        if self.burn_in < 0:
            raise ArgumentError(f"burn-in must be >= 0, got {self.burn_in}")
        if self.kind == "bn":
            self.window = 1


@dataclass
class CbnState:
    """
    Mutable state of one normalization layer.

    `records` holds at most window - 1 IterationRecords, most recent first.
    `t` counts optimizer steps and is advanced by the optimizer.
    """

    config: BnConfig
    affine: AffineParams
    t: int = 0
    records: deque = field(default_factory=deque)
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None
    running_updates: int = 0

    @classmethod
    def create(cls, channels, cfg):
        return cls(
            config=cfg,
            affine=AffineParams.identity(channels),
            records=deque(maxlen=cfg.window - 1),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
        )

    @property
    def channels(self):
        return self.affine.gamma.shape[0]

    @property
    def window_now(self):
        return effective_window(self.t, self.config.window, self.config.burn_in, len(self.records))

    def buffer_nbytes(self):
        '''Bytes held by the ring buffer: statistics, their gradients and weight snapshots.'''
        total = 0
        for record in self.records:
            for value in (record.mu, record.nu, record.g_mu, record.g_nu, record.theta):
                if value is not None:
                    total += value.nbytes
        return total

    def push(self, record):
        if len(self.records) == self.records.maxlen and self.records:
            logger.debug("evicting record of iteration %d", self.records[-1].iteration)
        self.records.appendleft(record)


@dataclass
class NormCache:
    '''Everything the backward pass of one normalizer call needs.'''

    kind: str
    x: np.ndarray
    x_hat: np.ndarray
    gamma: np.ndarray
    mu_bar: np.ndarray
    inv_std: np.ndarray
    window: int
    mu_t: np.ndarray
    clamped: np.ndarray
    records: list
    compensated: list
    taylor: bool


def channel_axes(x):
    if x.ndim < 2:
        raise ShapeError(f"normalizer input needs a channel axis, got {x.shape}")
    return (0,) + tuple(range(2, x.ndim))


def per_channel(v, ndim):
    '''Lift a length-C vector to broadcast against an N x C x ... tensor.'''
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def batch_moments(x):
    '''Per-channel mean and mean of squares over batch and spatial axes.'''
    axes = channel_axes(x)
    mu = reduce_mean_over(x, axes).ravel()
    nu = reduce_mean_over(elementwise("square", x), axes).ravel()
    return mu, nu


def _check_channels(x, state):
    if x.ndim < 2 or x.shape[1] != state.channels:
        raise ShapeError(f"input {x.shape} does not have {state.channels} channels")
    if int(np.prod(x.shape)) // x.shape[1] < 1:
        raise ShapeError("normalizer needs at least one value per channel")


def _whiten(x, mu_bar, var_bar, affine, eps):
    nd = x.ndim
    inv_std = 1.0 / np.sqrt(var_bar + eps)
    x_hat = (x - per_channel(mu_bar, nd)) * per_channel(inv_std, nd)
    y = per_channel(affine.gamma, nd) * x_hat + per_channel(affine.beta, nd)
    return y, x_hat, inv_std


def _update_running(state, mu_bar, var_bar):
    rho = state.config.momentum
    state.running_mean = rho * state.running_mean + (1.0 - rho) * mu_bar
    state.running_var = rho * state.running_var + (1.0 - rho) * var_bar
    state.running_updates += 1


def _normalize(x, state, mu_t, nu_t, records, compensated):
    window = 1 + len(records)
    stats = aggregate((mu_t, nu_t), compensated)
    y, x_hat, inv_std = _whiten(x, stats.mu, stats.var, state.affine, state.config.eps)
    _update_running(state, stats.mu, stats.var)
    cache = NormCache(
        kind=state.config.kind,
        x=x,
        x_hat=x_hat,
        gamma=state.affine.gamma.copy(),
        mu_bar=stats.mu,
        inv_std=inv_std,
        window=window,
        mu_t=mu_t,
        clamped=stats.clamped,
        records=records,
        compensated=compensated,
        taylor=state.config.taylor_backprop,
    )
    return y, cache


def _window_records(state):
    k_eff = state.window_now
    if k_eff > 1 and state.t == state.config.burn_in and len(state.records) == k_eff - 1:
        logger.debug("burn-in over at iteration %d, window %d", state.t, k_eff)
    return list(state.records)[: k_eff - 1]


def bn_train_forward(x, state):
    """
    Plain batch normalization with current-batch statistics.

    Args:
        x: N x C x H x W (or N x C) activations.
        state: CbnState; only affine params and running statistics are used.

    Returns:
        (y, cache)
    """
    _check_channels(x, state)
    mu_t, nu_t = batch_moments(x)
    return _normalize(x, state, mu_t, nu_t, [], [])


def cbn_train_forward(x, theta, y_prev, geometry, state, cols=None):
    """
    Cross-iteration normalization of the current activations.

    Past statistics in the window are compensated to the current weights of
    the bound layer, aggregated with the current ones, and used to whiten x.
    Afterwards this iteration's statistics and their gradients with respect to
    the bound weights are pushed into the ring buffer.

    Args:
        x: Output of the bound layer at this iteration.
        theta: Current weights of the bound layer.
        y_prev: Input of the bound layer at this iteration.
        geometry: LayerGeometry of the bound layer.
        state: CbnState of this layer.
        cols: im2col matrix of y_prev from the bound layer's forward pass.

    Returns:
        (y, cache)
    """
    _check_channels(x, state)
    if theta.shape[0] != state.channels:
        raise StateError(f"bound weights {theta.shape} do not produce {state.channels} channels")
    mu_t, nu_t = batch_moments(x)
    records = _window_records(state)
    compensated = [compensate(record, theta) for record in records]
    y, cache = _normalize(x, state, mu_t, nu_t, records, compensated)

    if state.records.maxlen:
        g_mu, g_nu = stat_grads(y_prev, theta, geometry, x, cols)
        state.push(IterationRecord(state.t, mu_t, nu_t, g_mu, g_nu, theta.copy()))
    return y, cache


def naive_cbn_train_forward(x, state):
    """
    Cross-iteration normalization with stale statistics (no compensation).

    Returns:
        (y, cache)
    """
    _check_channels(x, state)
    mu_t, nu_t = batch_moments(x)
    records = _window_records(state)
    for record in records:
        if record.mu.shape != mu_t.shape:
            raise StateError("stored statistics belong to a different layer")
    stale = [(record.mu, record.nu) for record in records]
    y, cache = _normalize(x, state, mu_t, nu_t, records, stale)
    state.push(IterationRecord(state.t, mu_t, nu_t))
    return y, cache


def _backward(cache, grad_y):
    x = cache.x
    nd = x.ndim
    axes = channel_axes(x)
    m = x.size // x.shape[1]
    k = cache.window

    grad_beta = grad_y.sum(axis=axes)
    grad_gamma = (grad_y * cache.x_hat).sum(axis=axes)
    dx_hat = grad_y * per_channel(cache.gamma, nd)

    inv_std = cache.inv_std
    d_var = (dx_hat * (x - per_channel(cache.mu_bar, nd))).sum(axis=axes) * (-0.5) * inv_std**3
    d_nu_bar = d_var
    d_mu_bar = -dx_hat.sum(axis=axes) * inv_std - 2.0 * cache.mu_bar * d_var

    # current iteration; the clamp picks mu^2 only where mu^2 > nu
    clamp = cache.clamped[0]
    d_mu_t = d_mu_bar / k + np.where(clamp, 2.0 * cache.mu_t * d_nu_bar / k, 0.0)
    d_nu_t = np.where(clamp, 0.0, d_nu_bar / k)
    grad_x = (
        dx_hat * per_channel(inv_std, nd)
        + per_channel(d_mu_t / m, nd)
        + per_channel(2.0 * d_nu_t / m, nd) * x
    )

    grad_theta = None
    if cache.kind == "cbn" and cache.taylor and cache.records:
        c_out = cache.records[0].theta.shape[0]
        grad_theta = np.zeros((c_out, cache.records[0].theta[0].size))
        for tau, (record, (mu_c, _)) in enumerate(zip(cache.records, cache.compensated), start=1):
            clamp = cache.clamped[tau]
            coef_mu = d_mu_bar / k + np.where(clamp, 2.0 * mu_c * d_nu_bar / k, 0.0)
            coef_nu = np.where(clamp, 0.0, d_nu_bar / k)
            grad_theta += np.outer(coef_mu, record.g_mu.ravel())
            grad_theta += coef_nu[:, None] * record.g_nu.reshape(c_out, -1)
        grad_theta = grad_theta.reshape(cache.records[0].theta.shape)
    return grad_x, grad_theta, grad_gamma, grad_beta


def bn_backward(cache, grad_y):
    """
    Exact gradients of bn_train_forward.

    Returns:
        (grad_x, grad_gamma, grad_beta)
    """
    grad_x, _, grad_gamma, grad_beta = _backward(cache, grad_y)
    return grad_x, grad_gamma, grad_beta


def cbn_backward(cache, grad_y):
    """
    Gradients of cbn_train_forward (and naive_cbn_train_forward).

    Past statistics are constants. The current mean and second moment enter
    with weight 1/k. With taylor_backprop on, the linear Taylor terms of the
    past iterations add grad_theta_extra for the bound weights; otherwise it
    is None.

    Returns:
        (grad_x, grad_theta_extra, grad_gamma, grad_beta)
    """
    return _backward(cache, grad_y)


def train_forward(x, state, theta=None, y_prev=None, geometry=None, cols=None):
    '''Dispatch on the configured normalizer kind.'''
    kind = state.config.kind
    if kind == "bn":
        return bn_train_forward(x, state)
    if kind == "naive-cbn":
        return naive_cbn_train_forward(x, state)
    if theta is None or y_prev is None or geometry is None:
        raise StateError("cbn needs the bound layer's weights, input and geometry")
    return cbn_train_forward(x, theta, y_prev, geometry, state, cols)


def eval_forward(x, state):
    """
    Normalize with the recorded running statistics; no state is changed.

    Returns:
        y
    """
    if state.running_updates == 0:
        raise StateError("running statistics are empty; train before evaluating")
    _check_channels(x, state)
    y, _, _ = _whiten(x, state.running_mean, state.running_var, state.affine, state.config.eps)
    return y


def batch_normalize(x, affine, eps=config.EPS):
    '''Stateless whitening with current-batch statistics, for probes.'''
    mu, nu = batch_moments(x)
    stats = aggregate((mu, nu), [])
    y, _, _ = _whiten(x, stats.mu, stats.var, affine, eps)
    return y
