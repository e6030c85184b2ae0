"""Desk-scale model presets."""

from __future__ import annotations

from .errors import ConfigurationError
from .nn import LayerSpec, ModelSpec


def desk_cnn(input_shape: tuple[int, int, int], num_classes: int) -> ModelSpec:
    """Four conv layers (8/16/16/32 channels) and two dense layers; six
    parameterized layers total, deep enough for a meaningful split search."""
    c, h, w = input_shape
    if h % 8 or w % 8:
        raise ConfigurationError("desk_cnn needs image sides divisible by 8")
    flat = 32 * (h // 8) * (w // 8)
    layers = (
        LayerSpec("conv1", "conv2d", in_channels=c, out_channels=8),
        LayerSpec("relu1", "relu"),
        LayerSpec("pool1", "maxpool2x2"),
        LayerSpec("conv2", "conv2d", in_channels=8, out_channels=16),
        LayerSpec("relu2", "relu"),
        LayerSpec("pool2", "maxpool2x2"),
        LayerSpec("conv3", "conv2d", in_channels=16, out_channels=16),
        LayerSpec("relu3", "relu"),
        LayerSpec("conv4", "conv2d", in_channels=16, out_channels=32),
        LayerSpec("relu4", "relu"),
        LayerSpec("pool3", "maxpool2x2"),
        LayerSpec("flatten", "flatten"),
        LayerSpec("dense1", "dense", fan_in=flat, fan_out=64),
        LayerSpec("relu5", "relu"),
        LayerSpec("dense2", "dense", fan_in=64, fan_out=num_classes),
        LayerSpec("head", "softmax_xent_head"),
    )
    return ModelSpec(layers, input_shape, num_classes)


def char_mlp(input_dim: int, num_classes: int) -> ModelSpec:
    """Three dense layers over one-hot character windows; the last layer is
    the natural fine-tuning group."""
    layers = (
        LayerSpec("dense1", "dense", fan_in=input_dim, fan_out=96),
        LayerSpec("relu1", "relu"),
        LayerSpec("dense2", "dense", fan_in=96, fan_out=64),
        LayerSpec("relu2", "relu"),
        LayerSpec("dense3", "dense", fan_in=64, fan_out=num_classes),
        LayerSpec("head", "softmax_xent_head"),
    )
    return ModelSpec(layers, (input_dim,), num_classes)


PRESETS = {"desk_cnn": desk_cnn, "char_mlp": char_mlp}
PRESET_PARAM_LAYERS = {"desk_cnn": 6, "char_mlp": 3}
