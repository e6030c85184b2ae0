"""Minimal deterministic tensor/NN engine: forward, backward, SGD with layer freezing.

Parameters are stored as float32 tensors; all internal computation runs in
float64 so that gradients survive a central-finite-difference check at 1e-3
relative tolerance and reductions are reproducible. The layer set is fixed:
dense, 3x3 stride-1 same-padding conv, relu, 2x2 maxpool, flatten, and a
softmax cross-entropy head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InputError, NumericError
from .rng import Rng

PARAM_KINDS = ("dense", "conv2d")
LAYER_KINDS = ("dense", "conv2d", "relu", "maxpool2x2", "flatten", "softmax_xent_head")


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a model. Size fields are meaningful only for the kind that
    uses them (fan_in/fan_out for dense, in/out_channels for conv2d)."""

    name: str
    kind: str
    fan_in: int = 0
    fan_out: int = 0
    in_channels: int = 0
    out_channels: int = 0

    @property
    def has_params(self) -> bool:
        return self.kind in PARAM_KINDS


@dataclass(frozen=True)
class ModelSpec:
    """Ordered layer list plus input contract. Layer indices are 1-based."""

    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    num_classes: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        _validate_spec(self)

    def param_layer_indices(self) -> tuple[int, ...]:
        """1-based indices of the parameterized layers, in order."""
        return tuple(i + 1 for i, l in enumerate(self.layers) if l.has_params)

    @property
    def num_param_layers(self) -> int:
        return sum(1 for l in self.layers if l.has_params)

    def layer(self, layer_index: int) -> LayerSpec:
        return self.layers[layer_index - 1]


def _validate_spec(spec: ModelSpec) -> None:
    if len(spec.layers) < 2:
        raise ConfigurationError("model needs at least 2 layers")
    names = [l.name for l in spec.layers]
    if len(set(names)) != len(names):
        raise ConfigurationError("layer names must be unique")
    if spec.num_classes < 2:
        raise ConfigurationError("num_classes must be >= 2")
    shape = tuple(spec.input_shape)
    for i, layer in enumerate(spec.layers):
        if layer.kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown layer kind '{layer.kind}' in layer '{layer.name}'")
        last = i == len(spec.layers) - 1
        if layer.kind == "softmax_xent_head" and not last:
            raise ConfigurationError("softmax_xent_head must be the final layer")
        shape = _layer_output_shape(layer, shape, spec.num_classes)
    if spec.layers[-1].kind != "softmax_xent_head":
        raise ConfigurationError("final layer must be softmax_xent_head")


def _layer_output_shape(
    layer: LayerSpec, shape: tuple[int, ...], num_classes: int
) -> tuple[int, ...]:
    """Shape produced by `layer` on input `shape`, raising if they do not compose."""
    kind = layer.kind
    if kind == "dense":
        if len(shape) != 1 or shape[0] != layer.fan_in:
            raise ConfigurationError(
                f"dense layer '{layer.name}' expects flat input of {layer.fan_in}, got {shape}"
            )
        if layer.fan_out < 1:
            raise ConfigurationError(f"dense layer '{layer.name}' needs fan_out >= 1")
        return (layer.fan_out,)
    if kind == "conv2d":
        if len(shape) != 3 or shape[0] != layer.in_channels:
            raise ConfigurationError(
                f"conv layer '{layer.name}' expects {layer.in_channels}-channel image, got {shape}"
            )
        if layer.out_channels < 1:
            raise ConfigurationError(f"conv layer '{layer.name}' needs out_channels >= 1")
        return (layer.out_channels, shape[1], shape[2])
    if kind == "relu":
        return shape
    if kind == "maxpool2x2":
        if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
            raise ConfigurationError(
                f"maxpool layer '{layer.name}' needs an image with even height/width, got {shape}"
            )
        return (shape[0], shape[1] // 2, shape[2] // 2)
    if kind == "flatten":
        if len(shape) != 3:
            raise ConfigurationError(f"flatten layer '{layer.name}' needs an image input, got {shape}")
        return (shape[0] * shape[1] * shape[2],)
    # softmax_xent_head
    if shape != (num_classes,):
        raise ConfigurationError(
            f"softmax head expects {num_classes} logits, got input shape {shape}"
        )
    return shape


@dataclass(frozen=True)
class ParamEntry:
    layer_index: int
    layer_name: str
    weight: np.ndarray
    bias: np.ndarray

    @property
    def scalar_count(self) -> int:
        return int(self.weight.size + self.bias.size)


@dataclass(frozen=True)
class ParameterSet:
    """Ordered per-layer (weight, bias) tensors; the model state that federation moves around."""

    entries: tuple[ParamEntry, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))

    @property
    def total_scalars(self) -> int:
        return sum(e.scalar_count for e in self.entries)

    def entry(self, layer_index: int) -> ParamEntry:
        for e in self.entries:
            if e.layer_index == layer_index:
                return e
        raise InputError(f"no parameterized layer with index {layer_index}")


@dataclass(frozen=True)
class FreezeMask:
    """Frozen flag per parameterized layer, keyed by 1-based layer index."""

    frozen: dict[int, bool]

    @staticmethod
    def none_frozen(spec: ModelSpec) -> "FreezeMask":
        return FreezeMask({i: False for i in spec.param_layer_indices()})

    @staticmethod
    def from_frozen_indices(spec: ModelSpec, frozen_indices: set[int]) -> "FreezeMask":
        indices = spec.param_layer_indices()
        unknown = frozen_indices - set(indices)
        if unknown:
            raise InputError(f"freeze mask names non-parameterized layers: {sorted(unknown)}")
        return FreezeMask({i: i in frozen_indices for i in indices})

    def is_frozen(self, layer_index: int) -> bool:
        return self.frozen[layer_index]


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    labels: np.ndarray


# Gradients: per parameterized layer_index -> (d_weight, d_bias), float32.
Gradients = dict[int, tuple[np.ndarray, np.ndarray]]


def _glorot_bound(layer: LayerSpec) -> tuple[float, tuple[int, ...]]:
    if layer.kind == "dense":
        fan_in, fan_out = layer.fan_in, layer.fan_out
        shape = (layer.fan_in, layer.fan_out)
    else:
        fan_in = layer.in_channels * 9
        fan_out = layer.out_channels * 9
        shape = (layer.out_channels, layer.in_channels, 3, 3)
    return float(np.sqrt(6.0 / (fan_in + fan_out))), shape


def init_params(spec: ModelSpec, rng: Rng) -> ParameterSet:
    """Uniform Glorot weights, zero biases; draw order is layer order, so the
    result is a pure function of (spec, rng)."""
    gen = rng.generator()
    entries = []
    for idx in spec.param_layer_indices():
        layer = spec.layer(idx)
        bound, shape = _glorot_bound(layer)
        weight = gen.uniform(-bound, bound, size=shape).astype(np.float32)
        bias_size = layer.fan_out if layer.kind == "dense" else layer.out_channels
        bias = np.zeros(bias_size, dtype=np.float32)
        entries.append(ParamEntry(idx, layer.name, weight, bias))
    return ParameterSet(tuple(entries))


def validate_params(spec: ModelSpec, params: ParameterSet) -> None:
    expected = spec.param_layer_indices()
    got = tuple(e.layer_index for e in params.entries)
    if got != expected:
        raise InputError(f"parameter set covers layers {got}, model has {expected}")
    for e in params.entries:
        _, shape = _glorot_bound(spec.layer(e.layer_index))
        if tuple(e.weight.shape) != shape:
            raise InputError(
                f"layer {e.layer_index} weight shape {e.weight.shape} does not match spec {shape}"
            )


def _check_batch(spec: ModelSpec, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    feats = np.asarray(batch.features)
    labels = np.asarray(batch.labels)
    if feats.ndim != len(spec.input_shape) + 1 or tuple(feats.shape[1:]) != spec.input_shape:
        raise InputError(
            f"batch features shaped {feats.shape}, expected (n, {', '.join(map(str, spec.input_shape))})"
        )
    if labels.shape != (feats.shape[0],):
        raise InputError("labels must be a vector aligned with the batch")
    if feats.shape[0] == 0:
        raise InputError("empty batch")
    if labels.min() < 0 or labels.max() >= spec.num_classes:
        raise InputError(f"labels must lie in [0, {spec.num_classes})")
    return feats.astype(np.float64), labels.astype(np.int64)


def _conv_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    n, c, h, w = x.shape
    out_ch = weight.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    # (n, c, h, w, 3, 3) view -> im2col matrix (n*h*w, c*9)
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(n * h * w, c * 9)
    y = cols @ weight.reshape(out_ch, c * 9).T + bias
    y = y.reshape(n, h, w, out_ch).transpose(0, 3, 1, 2)
    return y, (cols, (n, c, h, w))


def _conv_backward(dy: np.ndarray, cache, weight: np.ndarray):
    cols, (n, c, h, w) = cache
    out_ch = weight.shape[0]
    dy_mat = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(n * h * w, out_ch)
    d_bias = dy_mat.sum(axis=0)
    d_weight = (dy_mat.T @ cols).reshape(out_ch, c, 3, 3)
    # dx is the full correlation of dy with spatially flipped kernels
    dyp = np.pad(dy, ((0, 0), (0, 0), (1, 1), (1, 1)))
    dy_windows = np.lib.stride_tricks.sliding_window_view(dyp, (3, 3), axis=(2, 3))
    dy_cols = np.ascontiguousarray(dy_windows.transpose(0, 2, 3, 1, 4, 5))
    dy_cols = dy_cols.reshape(n * h * w, out_ch * 9)
    flipped = np.flip(weight, (2, 3)).transpose(0, 2, 3, 1).reshape(out_ch * 9, c)
    dx = (dy_cols @ flipped).reshape(n, h, w, c).transpose(0, 3, 1, 2)
    return dx, d_weight, d_bias


def _maxpool_forward(x: np.ndarray):
    n, c, h, w = x.shape
    windows = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(n, c, h // 2, w // 2, 4)
    argmax = windows.argmax(axis=4)  # first max wins ties
    y = np.take_along_axis(windows, argmax[..., None], axis=4)[..., 0]
    return y, argmax


def _maxpool_backward(dy: np.ndarray, argmax: np.ndarray, in_shape: tuple[int, ...]):
    n, c, h, w = in_shape
    dwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=np.float64)
    np.put_along_axis(dwin, argmax[..., None], dy[..., None], axis=4)
    dwin = dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return dwin.reshape(n, c, h, w)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def _run_layers(spec: ModelSpec, params: ParameterSet, x: np.ndarray):
    """Forward through every layer up to the head; returns (logits, caches)."""
    entry_by_index = {e.layer_index: e for e in params.entries}
    caches: list[tuple] = []
    for i, layer in enumerate(spec.layers[:-1]):
        idx = i + 1
        if layer.kind == "dense":
            e = entry_by_index[idx]
            w64 = e.weight.astype(np.float64)
            y = x @ w64 + e.bias.astype(np.float64)
            caches.append(("dense", idx, x, w64))
        elif layer.kind == "conv2d":
            e = entry_by_index[idx]
            w64 = e.weight.astype(np.float64)
            y, cache = _conv_forward(x, w64, e.bias.astype(np.float64))
            caches.append(("conv2d", idx, cache, w64))
        elif layer.kind == "relu":
            y = np.maximum(x, 0.0)
            caches.append(("relu", idx, x > 0.0))
        elif layer.kind == "maxpool2x2":
            y, argmax = _maxpool_forward(x)
            caches.append(("maxpool2x2", idx, argmax, x.shape))
        else:  # flatten
            y = x.reshape(x.shape[0], -1)
            caches.append(("flatten", idx, x.shape))
        x = y
    return x, caches


def _head_loss(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    probs = _softmax(logits)
    n = logits.shape[0]
    picked = probs[np.arange(n), labels]
    loss = float(-np.log(np.maximum(picked, 1e-300)).mean())
    return loss, probs


def forward(spec: ModelSpec, params: ParameterSet, batch: Batch) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and row-stochastic class probabilities."""
    feats, labels = _check_batch(spec, batch)
    logits, _ = _run_layers(spec, params, feats)
    loss, probs = _head_loss(logits, labels)
    return loss, probs.astype(np.float32)


def loss_and_gradients(
    spec: ModelSpec, params: ParameterSet, batch: Batch
) -> tuple[float, Gradients]:
    """One combined forward/backward pass (what the local solver iterates on)."""
    feats, labels = _check_batch(spec, batch)
    logits, caches = _run_layers(spec, params, feats)
    loss, probs = _head_loss(logits, labels)
    n = logits.shape[0]
    d = probs.copy()
    d[np.arange(n), labels] -= 1.0
    d /= n

    grads: Gradients = {}
    for cache in reversed(caches):
        kind = cache[0]
        if kind == "dense":
            _, idx, x_in, w64 = cache
            grads[idx] = (
                (x_in.T @ d).astype(np.float32),
                d.sum(axis=0).astype(np.float32),
            )
            d = d @ w64.T
        elif kind == "conv2d":
            _, idx, cols, w64 = cache
            d, d_weight, d_bias = _conv_backward(d, cols, w64)
            grads[idx] = (d_weight.astype(np.float32), d_bias.astype(np.float32))
        elif kind == "relu":
            d = d * cache[2]
        elif kind == "maxpool2x2":
            d = _maxpool_backward(d, cache[2], cache[3])
        else:  # flatten
            d = d.reshape(cache[2])
    return loss, grads


def backward(spec: ModelSpec, params: ParameterSet, batch: Batch) -> Gradients:
    """Gradient of the mean batch loss for every parameterized layer."""
    _, grads = loss_and_gradients(spec, params, batch)
    return grads


def sgd_step(
    params: ParameterSet, grads: Gradients, lr: float, mask: FreezeMask
) -> ParameterSet:
    """w <- w - lr*g on unfrozen layers; frozen entries are returned untouched
    (same arrays, so bit-identity is structural)."""
    if lr < 0:
        raise InputError("learning rate must be >= 0")
    entries = []
    for e in params.entries:
        if mask.is_frozen(e.layer_index):
            entries.append(e)
            continue
        gw, gb = grads[e.layer_index]
        if not (np.isfinite(gw).all() and np.isfinite(gb).all()):
            raise NumericError(f"non-finite gradient at layer {e.layer_index} ('{e.layer_name}')")
        weight = (e.weight.astype(np.float64) - lr * gw.astype(np.float64)).astype(np.float32)
        bias = (e.bias.astype(np.float64) - lr * gb.astype(np.float64)).astype(np.float32)
        entries.append(ParamEntry(e.layer_index, e.layer_name, weight, bias))
    return ParameterSet(tuple(entries))


def flatten_layer(params: ParameterSet, layer_index: int) -> np.ndarray:
    """Row-major weight-then-bias vector of one parameterized layer."""
    e = params.entry(layer_index)
    return np.concatenate([e.weight.ravel(), e.bias.ravel()])


def unflatten_layer(params: ParameterSet, layer_index: int, vec: np.ndarray) -> ParameterSet:
    """Inverse of flatten_layer: replace one layer's tensors from a flat vector."""
    e = params.entry(layer_index)
    vec = np.asarray(vec, dtype=np.float32)
    if vec.shape != (e.scalar_count,):
        raise InputError(f"vector of {vec.size} values cannot fill layer {layer_index} "
                         f"({e.scalar_count} scalars)")
    weight = vec[: e.weight.size].reshape(e.weight.shape).copy()
    bias = vec[e.weight.size :].reshape(e.bias.shape).copy()
    entries = tuple(
        ParamEntry(x.layer_index, x.layer_name, weight, bias) if x.layer_index == layer_index else x
        for x in params.entries
    )
    return ParameterSet(entries)
