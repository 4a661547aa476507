'''
A small layer zoo with hand-written forward and backward passes.

Layers are applied in order; every normalizer is bound to the parameterized
layer right before it, whose weights are the ones its statistics are
compensated against.
'''

import copy
import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

import normalizers
from compensation import LayerGeometry
from errors import ArgumentError, GraphError, ShapeError, StateError
from normalizers import BnConfig, CbnState
from tensor_core import conv2d_backward, conv2d_forward, conv2d_forward_cols, conv_output_size

logger = logging.getLogger(__name__)

LAYER_KINDS = ("conv2d", "fc", "relu", "avg-pool", "max-pool", "normalizer", "flatten")
PARAM_KINDS = ("conv2d", "fc")
MODES = ("train", "eval")


@dataclass
class LayerSpec:
    """
    One layer of a NetworkGraph.

    Args:
        kind: One of LAYER_KINDS.
        channels: Output channels (conv2d) or output features (fc).
        kernel: Square kernel size of conv2d.
        stride: Stride of conv2d.
        padding: Zero padding of conv2d.
        pool: Window of avg-pool / max-pool; None on avg-pool means global.
        norm: BnConfig of a normalizer layer.
    """

    kind: str
    channels: Optional[int] = None
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    pool: Optional[int] = None
    norm: Optional[BnConfig] = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise GraphError(f"unknown layer kind {self.kind!r}")


@dataclass
class NetworkGraph:
    """
    Layers, their parameters keyed by layer index, normalizer states and the
    optimizer velocity.
    """

    layers: list
    input_shape: tuple
    shapes: list
    params: dict
    norm_states: dict
    velocity: dict = field(default_factory=dict)

    def parameters(self):
        '''All trainable arrays keyed by (layer index, name), including gamma and beta.'''
        out = {}
        for l in sorted(set(self.params) | set(self.norm_states)):
            if l in self.params:
                for name, value in self.params[l].items():
                    out[(l, name)] = value
            if l in self.norm_states:
                affine = self.norm_states[l].affine
                out[(l, "gamma")] = affine.gamma
                out[(l, "beta")] = affine.beta
        return out

    def geometry(self, l):
        spec = self.layers[l]
        if spec.kind == "conv2d":
            return LayerGeometry((spec.kernel, spec.kernel), spec.stride, spec.padding)
        if spec.kind == "fc":
            return LayerGeometry()
        raise GraphError(f"layer {l} ({spec.kind}) has no weights")

    def param_layers(self):
        return [l for l, spec in enumerate(self.layers) if spec.kind in PARAM_KINDS]

    def normalizer_layers(self):
        return sorted(self.norm_states)

    def clone(self):
        return copy.deepcopy(self)


@dataclass
class ForwardTrace:
    """
    Per-layer inputs and caches of one forward pass. In train mode `cols`
    holds the unfolded input of every conv2d and fc layer.
    """

    mode: str
    inputs: list = field(default_factory=list)
    caches: dict = field(default_factory=dict)
    cols: dict = field(default_factory=dict)


def _out_shape(spec, shape, l):
    if spec.kind == "conv2d":
        if len(shape) != 3:
            raise GraphError(f"layer {l}: conv2d needs C x H x W input, got {shape}")
        h = conv_output_size(shape[1], spec.kernel, spec.stride, spec.padding)
        w = conv_output_size(shape[2], spec.kernel, spec.stride, spec.padding)
        return (spec.channels, h, w)
    if spec.kind == "fc":
        if len(shape) != 1:
            raise GraphError(f"layer {l}: fc needs flat input, got {shape}")
        return (spec.channels,)
    if spec.kind in ("relu", "normalizer"):
        return shape
    if spec.kind == "flatten":
        return (int(np.prod(shape)),)
    # pooling
    if len(shape) != 3:
        raise GraphError(f"layer {l}: pooling needs C x H x W input, got {shape}")
    if spec.pool is None:
        if spec.kind == "max-pool":
            raise GraphError(f"layer {l}: max-pool needs a window")
        return (shape[0], 1, 1)
    if shape[1] % spec.pool or shape[2] % spec.pool:
        raise GraphError(f"layer {l}: {shape[1:]} is not divisible by pool {spec.pool}")
    return (shape[0], shape[1] // spec.pool, shape[2] // spec.pool)


def build_graph(layers, input_shape, rng):
    """
    Check that the layers compose and initialize their parameters.

    Weights use He-normal initialization; gamma = 1, beta = 0. A layer that
    feeds a normalizer carries no bias.

    Args:
        layers: Sequence of LayerSpec.
        input_shape: Per-example input extents (C x H x W or D).
        rng: tensor_core.Rng.

    Returns:
        NetworkGraph
    """
    layers = list(layers)
    shapes, params, states = [], {}, {}
    shape = tuple(input_shape)
    for l, spec in enumerate(layers):
        try:
            out = _out_shape(spec, shape, l)
        except ShapeError as e:
            raise GraphError(f"layer {l}: {e}") from e
        feeds_norm = l + 1 < len(layers) and layers[l + 1].kind == "normalizer"
        if spec.kind == "conv2d":
            fan_in = shape[0] * spec.kernel * spec.kernel
            params[l] = {"weight": rng.normal((spec.channels, shape[0], spec.kernel, spec.kernel),
                                              np.sqrt(2.0 / fan_in))}
        elif spec.kind == "fc":
            params[l] = {"weight": rng.normal((spec.channels, shape[0]), np.sqrt(2.0 / shape[0]))}
        if spec.kind in PARAM_KINDS and not feeds_norm:
            params[l]["bias"] = np.zeros(spec.channels)
        if spec.kind == "normalizer":
            if l == 0 or layers[l - 1].kind not in PARAM_KINDS:
                raise GraphError(f"layer {l}: a normalizer must follow conv2d or fc")
            states[l] = CbnState.create(shape[0], replace(spec.norm or BnConfig()))
        shapes.append(out)
        shape = out
    return NetworkGraph(layers, tuple(input_shape), shapes, params, states)


def _pool_windows(x, p):
    n, c, h, w = x.shape
    return x.reshape(n, c, h // p, p, w // p, p).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // p, w // p, p * p)


def _layer_forward(graph, l, x, mode, trace, batch_stats=False):
    spec = graph.layers[l]
    params = graph.params.get(l)
    if spec.kind == "conv2d":
        if trace is None or trace.mode != "train":
            out = conv2d_forward(x, params["weight"], spec.stride, spec.padding)
        else:
            out, trace.cols[l] = conv2d_forward_cols(x, params["weight"], spec.stride, spec.padding)
        if "bias" in params:
            out = out + params["bias"].reshape(1, -1, 1, 1)
        return out
    if spec.kind == "fc":
        if trace is not None and trace.mode == "train":
            trace.cols[l] = x
        out = x @ params["weight"].T
        if "bias" in params:
            out = out + params["bias"]
        return out
    if spec.kind == "relu":
        return np.maximum(x, 0.0)
    if spec.kind == "flatten":
        return x.reshape(x.shape[0], -1)
    if spec.kind == "avg-pool":
        if spec.pool is None:
            return x.mean(axis=(2, 3), keepdims=True)
        return _pool_windows(x, spec.pool).mean(axis=-1)
    if spec.kind == "max-pool":
        windows = _pool_windows(x, spec.pool)
        # argmax keeps the first maximum: ties go to the lowest flat index
        idx = windows.argmax(axis=-1)
        if trace is not None:
            trace.caches[l] = idx
        return np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    state = graph.norm_states[l]
    if batch_stats:
        return normalizers.batch_normalize(x, state.affine, state.config.eps)
    if mode == "eval":
        return normalizers.eval_forward(x, state)
    y, cache = normalizers.train_forward(
        x, state,
        theta=graph.params[l - 1]["weight"],
        y_prev=trace.inputs[l - 1],
        geometry=graph.geometry(l - 1),
        cols=trace.cols.get(l - 1),
    )
    trace.caches[l] = cache
    return y


def forward(graph, batch, mode="train"):
    """
    Apply all layers in order.

    In train mode normalizers update their state and the trace keeps what
    backward needs; in eval mode nothing is mutated.

    Args:
        graph: NetworkGraph.
        batch: N x (input_shape) tensor.
        mode: train or eval.

    Returns:
        (logits, trace)
    """
    if mode not in MODES:
        raise ArgumentError(f"unknown mode {mode!r}")
    if tuple(batch.shape[1:]) != graph.input_shape:
        raise GraphError(f"batch {batch.shape} does not fit input {graph.input_shape}")
    trace = ForwardTrace(mode)
    x = batch
    for l in range(len(graph.layers)):
        trace.inputs.append(x)
        x = _layer_forward(graph, l, x, mode, trace)
    return x, trace


def probe_forward(graph, batch, upto):
    '''Output of layer `upto` with every normalizer on current-batch statistics; no state changes.'''
    x = batch
    for l in range(upto + 1):
        x = _layer_forward(graph, l, x, "eval", None, batch_stats=True)
    return x


def backward(graph, trace, grad_logits):
    """
    Backpropagate through the trace of a train-mode forward.

    Through CBN layers gradients reach only the current activations and the
    bound weights; stored past statistics are constants.

    Returns:
        Gradients keyed like graph.parameters()
    """
    if trace is None or trace.mode != "train" or len(trace.inputs) != len(graph.layers):
        raise StateError("backward needs the trace of a train-mode forward on this graph")
    grads = {}
    extra = {}
    g = grad_logits
    for l in reversed(range(len(graph.layers))):
        spec = graph.layers[l]
        x = trace.inputs[l]
        if spec.kind == "conv2d":
            weight = graph.params[l]["weight"]
            gx, gw = conv2d_backward(x, weight, g, spec.stride, spec.padding, cols=trace.cols.get(l))
            if "bias" in graph.params[l]:
                grads[(l, "bias")] = g.sum(axis=(0, 2, 3))
            grads[(l, "weight")] = gw + extra.get(l, 0.0)
            g = gx
        elif spec.kind == "fc":
            weight = graph.params[l]["weight"]
            if "bias" in graph.params[l]:
                grads[(l, "bias")] = g.sum(axis=0)
            grads[(l, "weight")] = g.T @ x + extra.get(l, 0.0)
            g = g @ weight
        elif spec.kind == "relu":
            g = g * (x > 0)
        elif spec.kind == "flatten":
            g = g.reshape(x.shape)
        elif spec.kind == "avg-pool":
            n, c, h, w = x.shape
            if spec.pool is None:
                g = np.broadcast_to(g / (h * w), x.shape).copy()
            else:
                p = spec.pool
                g = np.broadcast_to((g / (p * p))[:, :, :, None, :, None], (n, c, h // p, p, w // p, p))
                g = g.reshape(x.shape)
        elif spec.kind == "max-pool":
            n, c, h, w = x.shape
            p = spec.pool
            scattered = np.zeros((n, c, h // p, w // p, p * p))
            np.put_along_axis(scattered, trace.caches[l][..., None], g[..., None], axis=-1)
            g = scattered.reshape(n, c, h // p, w // p, p, p).transpose(0, 1, 2, 4, 3, 5).reshape(x.shape)
        else:
            gx, g_theta, g_gamma, g_beta = normalizers.cbn_backward(trace.caches[l], g)
            grads[(l, "gamma")] = g_gamma
            grads[(l, "beta")] = g_beta
            if g_theta is not None:
                extra[l - 1] = g_theta
            g = gx
    return grads


def sgd_step(graph, grads, lr, momentum, weight_decay):
    """
    Classical momentum update on every parameter, gamma and beta included.

    v <- momentum * v + g + weight_decay * theta;  theta <- theta - lr * v

    Advances the iteration counter of every normalizer by one.

    Returns:
        The updated graph (parameters change in place).
    """
    params = graph.parameters()
    if set(grads) != set(params):
        raise StateError(f"gradient keys do not match parameters: {sorted(set(grads) ^ set(params))}")
    for key, theta in params.items():
        v = graph.velocity.get(key)
        if v is None:
            v = np.zeros_like(theta)
        v = momentum * v + grads[key] + weight_decay * theta
        graph.velocity[key] = v
        theta -= lr * v
    for state in graph.norm_states.values():
        state.t += 1
    return graph


def softmax_cross_entropy(logits, labels):
    """
    Mean softmax cross-entropy and its gradient with respect to the logits.

    Returns:
        (loss, grad_logits)
    """
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -log_probs[np.arange(n), labels].mean()
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def conv_block(channels, stride, norm):
    return [
        LayerSpec("conv2d", channels=channels, kernel=3, stride=stride, padding=1),
        LayerSpec("normalizer", norm=norm),
        LayerSpec("relu"),
    ]


PRESETS = {
    # (channels, stride) per conv block
    "desk-cnn": ((16, 1), (32, 2), (32, 1), (64, 2)),
    "tiny-cnn": ((8, 1), (16, 2)),
}


def build_preset(name, input_shape, num_classes, norm, rng):
    """
    Build a named CNN: conv blocks (conv -> normalizer -> relu), global
    average pooling and a fully-connected head.

    Args:
        name: Key of PRESETS.
        input_shape: C x H x W.
        num_classes: Width of the head.
        norm: BnConfig shared (copied) by every normalizer.
        rng: tensor_core.Rng for initialization.

    Returns:
        NetworkGraph
    """
    if name not in PRESETS:
        raise ArgumentError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}")
    layers = []
    for channels, stride in PRESETS[name]:
        layers.extend(conv_block(channels, stride, norm))
    layers += [LayerSpec("avg-pool"), LayerSpec("flatten"), LayerSpec("fc", channels=num_classes)]
    graph = build_graph(layers, input_shape, rng)
    logger.info("built %s: %d layers, %d parameters", name, len(layers),
                sum(v.size for v in graph.parameters().values()))
    return graph
