'''
Brute-force references the efficient code is validated against.

Nothing here goes through im2col or matrix products: convolutions are sums of
shifted input slices and Jacobians are built entry by entry.
'''

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

import config
from compensation import LayerGeometry, as_conv_input, as_conv_weight, stat_grads
from errors import ArgumentError, IntegrityError
from network import probe_forward
from tensor_core import Rng, conv_output_size

logger = logging.getLogger(__name__)


def content_hash(arr):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    digest = hashlib.sha256(repr(arr.shape).encode())
    digest.update(arr.tobytes())
    return digest.hexdigest()


@dataclass
class ReplayBundle:
    """
    A stored input batch of the bound layer, kept only for probe layers.

    Args:
        batch: Input of the bound layer at iteration `iteration`.
        geometry: LayerGeometry of the bound layer.
        theta: Bound weights at that iteration.
        digest: sha256 of the batch taken when the bundle was made.
    """

    batch: np.ndarray
    geometry: LayerGeometry
    theta: np.ndarray
    digest: str
    iteration: int = 0


def make_replay_bundle(batch, geometry, theta, iteration=0):
    batch = np.array(batch, dtype=np.float64)
    return ReplayBundle(batch, geometry, np.array(theta, dtype=np.float64), content_hash(batch), iteration)


def naive_conv2d(y, theta, geometry):
    '''Cross-correlation as an explicit sum over output channel, input channel and kernel offset.'''
    y = as_conv_input(y)
    theta = as_conv_weight(theta)
    n, c_in, h, w = y.shape
    c_out = theta.shape[0]
    kh, kw = geometry.kernel
    s, pad = geometry.stride, geometry.padding
    h_out = conv_output_size(h, kh, s, pad)
    w_out = conv_output_size(w, kw, s, pad)
    ypad = np.zeros((n, c_in, h + 2 * pad, w + 2 * pad))
    ypad[:, :, pad : pad + h, pad : pad + w] = y
    out = np.zeros((n, c_out, h_out, w_out))
    for j in range(c_out):
        for p in range(c_in):
            for a in range(kh):
                for b in range(kw):
                    out[:, j] += theta[j, p, a, b] * ypad[:, p, a : a + s * h_out : s, b : b + s * w_out : s]
    return out, ypad


def replay_exact_stats(bundle, theta):
    """
    Exact statistics of a stored batch under the given weights.

    The convolution runs as shifted-slice sums, independent of the im2col
    path that produced the stored statistics. At the snapshot weights the two
    agree to 1e-12 relative, not bit for bit.

    Args:
        bundle: ReplayBundle.
        theta: Weights to evaluate with (usually the current ones).

    Returns:
        (mu_exact, nu_exact) per output channel
    """
    if content_hash(bundle.batch) != bundle.digest:
        raise IntegrityError(f"replay batch of iteration {bundle.iteration} was modified")
    x, _ = naive_conv2d(bundle.batch, theta, bundle.geometry)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    mu = x.sum(axis=(0, 2, 3)) / m
    nu = (x * x).sum(axis=(0, 2, 3)) / m
    return mu, nu


def naive_stat_jacobian(y_prev, theta, x, geometry):
    """
    Full Jacobians d mu_j / d theta_{q,p,eta} and d nu_j / d theta_{q,p,eta}.

    Every (j, q) block is differentiated directly; blocks with j != q come out
    as exact zeros.

    Args:
        y_prev: Input of the layer.
        theta: Layer weights.
        x: Layer output for (y_prev, theta).
        geometry: LayerGeometry.

    Returns:
        (jac_mu, jac_nu), each C_out x C_out x C_in x K_h x K_w
    """
    theta4 = as_conv_weight(theta)
    c_out, c_in, kh, kw = theta4.shape
    entries = c_out * c_out * c_in * kh * kw
    if entries > config.JACOBIAN_MAX_ENTRIES:
        raise ArgumentError(f"naive Jacobian would have {entries} entries (limit {config.JACOBIAN_MAX_ENTRIES})")
    x4 = as_conv_input(x)
    _, ypad = naive_conv2d(y_prev, theta4, geometry)
    n, _, h_out, w_out = x4.shape
    s = geometry.stride
    m = n * h_out * w_out
    jac_mu = np.zeros((c_out, c_out, c_in, kh, kw))
    jac_nu = np.zeros((c_out, c_out, c_in, kh, kw))
    for j in range(c_out):
        for q in range(c_out):
            # x_{i,j} depends on theta_q only through the j == q term
            indicator = 1.0 if j == q else 0.0
            for p in range(c_in):
                for a in range(kh):
                    for b in range(kw):
                        dx = indicator * ypad[:, p, a : a + s * h_out : s, b : b + s * w_out : s]
                        jac_mu[j, q, p, a, b] = dx.sum() / m
                        jac_nu[j, q, p, a, b] = 2.0 * (x4[:, j] * dx).sum() / m
    return jac_mu, jac_nu


def finite_diff(f, theta, h=config.FINITE_DIFF_STEP):
    """
    Central-difference Jacobian of f at theta.

    Args:
        f: Map from a tensor shaped like theta to a scalar or tensor.
        theta: Evaluation point.
        h: Step, > 0.

    Returns:
        Array of shape f(theta).shape + theta.shape
    """
    if not h > 0:
        raise ArgumentError(f"finite-difference step must be positive, got {h}")
    theta = np.array(theta, dtype=np.float64)
    out_shape = np.shape(f(theta))
    jac = np.zeros(out_shape + theta.shape)
    for idx in np.ndindex(theta.shape):
        plus = theta.copy()
        minus = theta.copy()
        plus[idx] += h
        minus[idx] -= h
        diff = (np.asarray(f(plus), dtype=np.float64) - np.asarray(f(minus), dtype=np.float64)) / (2.0 * h)
        jac[(Ellipsis,) + idx] = diff
    return jac


@dataclass
class GradRatioRow:
    '''||g(r|l)||_F / ||g(l|l)||_F for r = l-1 and l-2 (None where that layer does not exist).'''

    layer: int
    epoch: int
    mu_l1: float
    nu_l1: float
    mu_l2: Optional[float] = None
    nu_l2: Optional[float] = None


@dataclass
class GradRatioReport:
    rows: list = field(default_factory=list)

    def add(self, row):
        self.rows.append(row)

    def mean(self, name):
        values = [getattr(r, name) for r in self.rows if getattr(r, name) is not None]
        return float(np.mean(values)) if values else math.nan

    def fraction_below_one(self):
        values = [r.mu_l1 for r in self.rows] + [r.nu_l1 for r in self.rows]
        return float(np.mean([v < 1.0 for v in values])) if values else math.nan

    def columns(self):
        '''Unweighted means over layers, as diag_ metrics columns.'''
        return {f"diag_ratio_{name}": self.mean(name) for name in ("mu_l1", "nu_l1", "mu_l2", "nu_l2")}


def _bound_stats(graph, batch, bound):
    x = probe_forward(graph, batch, bound)
    axes = (0,) + tuple(range(2, x.ndim))
    return np.concatenate([x.mean(axis=axes), (x * x).mean(axis=axes)])


def _earlier_norms(graph, batch, bound, r, c_out, exact, probes, rng, h):
    weights = graph.params[r]
    original = weights["weight"]

    def stats(theta):
        weights["weight"] = theta
        try:
            return _bound_stats(graph, batch, bound)
        finally:
            weights["weight"] = original

    if exact:
        jac = finite_diff(stats, original, h)
        return float(np.linalg.norm(jac[:c_out])), float(np.linalg.norm(jac[c_out:]))
    # E ||J v||^2 = ||J||_F^2 for standard normal v
    sq_mu = sq_nu = 0.0
    for _ in range(probes):
        v = rng.normal(original.shape)
        jv = (stats(original + h * v) - stats(original - h * v)) / (2.0 * h)
        sq_mu += float(np.sum(jv[:c_out] ** 2))
        sq_nu += float(np.sum(jv[c_out:] ** 2))
    return math.sqrt(sq_mu / probes), math.sqrt(sq_nu / probes)


def grad_ratio_diagnostic(graph, batch, layer, epoch=0, exact=False,
                          probes=config.GRAD_RATIO_PROBES, rng=None, h=config.FINITE_DIFF_STEP):
    """
    Compare how strongly a normalizer's batch statistics depend on earlier
    weights versus the weights of its own bound layer.

    The bound-layer Jacobian norms are closed form. Earlier layers are
    differentiated numerically through the network prefix, with every
    normalizer on current-batch statistics: coordinate-wise when `exact`,
    otherwise with `probes` random directions.

    Args:
        graph: NetworkGraph (left unchanged).
        batch: Input batch.
        layer: Index of a normalizer layer.
        epoch: Stored on the row.

    Returns:
        GradRatioRow
    """
    if layer not in graph.norm_states:
        raise ArgumentError(f"layer {layer} is not a normalizer")
    bound = layer - 1
    earlier = [r for r in graph.param_layers() if r < bound]
    if not earlier:
        raise ArgumentError(f"normalizer {layer} has no parameterized layer before its bound layer")
    rng = rng or Rng(0)

    y_prev = probe_forward(graph, batch, bound - 1) if bound > 0 else batch
    x = probe_forward(graph, batch, bound)
    theta = graph.params[bound]["weight"]
    g_mu, g_nu = stat_grads(y_prev, theta, graph.geometry(bound), x)
    c_out = theta.shape[0]
    own_mu = math.sqrt(c_out) * float(np.linalg.norm(g_mu))
    own_nu = float(np.linalg.norm(g_nu))

    ratios = []
    for r in (earlier[-1], earlier[-2] if len(earlier) > 1 else None):
        if r is None:
            ratios.append((None, None))
            continue
        norm_mu, norm_nu = _earlier_norms(graph, batch, bound, r, c_out, exact, probes, rng, h)
        ratios.append((_ratio(norm_mu, own_mu), _ratio(norm_nu, own_nu)))
    row = GradRatioRow(layer, epoch, ratios[0][0], ratios[0][1], ratios[1][0], ratios[1][1])
    logger.debug("grad ratio layer %d: %s", layer, row)
    return row


def _ratio(num, den):
    if den == 0.0:
        return math.inf if num > 0.0 else 0.0
    return num / den
