"""Primitive layer inventory shared by the backbone and the codec.

Every layer that appears in a model graph is an ordinary ``torch.nn`` module.
``LayerSpec`` records describe those modules in a framework-neutral way; they
are used for shape validation, the textual model manifest and MAC counting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import torch
from torch import nn

from .gdn import GDN


class ShapeError(ValueError):
    """Input tensor is incompatible with a layer."""


@dataclass(frozen=True)
class ConvSpec:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1
    padding: int = 0
    bias: bool = False


@dataclass(frozen=True)
class TransConvSpec:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int
    bias: bool = True


@dataclass(frozen=True)
class BatchNormSpec:
    ch: int


@dataclass(frozen=True)
class ReLUSpec:
    pass


@dataclass(frozen=True)
class PReLUSpec:
    ch: int


@dataclass(frozen=True)
class SigmoidSpec:
    pass


@dataclass(frozen=True)
class GlobalAvgPoolSpec:
    pass


@dataclass(frozen=True)
class AvgPoolSpec:
    kernel: int
    stride: int
    ceil_mode: bool = False


@dataclass(frozen=True)
class UpsampleSpec:
    factor: int


@dataclass(frozen=True)
class DenseSpec:
    in_features: int
    out_features: int
    bias: bool = True


@dataclass(frozen=True)
class GdnSpec:
    ch: int
    inverse: bool = False


LayerSpec = Union[
    ConvSpec, TransConvSpec, BatchNormSpec, ReLUSpec, PReLUSpec, SigmoidSpec,
    GlobalAvgPoolSpec, AvgPoolSpec, UpsampleSpec, DenseSpec, GdnSpec,
]


class GlobalAvgPool(nn.Module):
    """Mean over the spatial axes: (N, C, H, W) -> (N, C)."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x.mean(dim=(2, 3))


def init_weights(module: nn.Module) -> None:
    """He-uniform (fan-in) for conv/dense weights, zero biases, unit BN scale."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def make_layer(spec: LayerSpec) -> nn.Module:
    if isinstance(spec, ConvSpec):
        layer = nn.Conv2d(spec.in_ch, spec.out_ch, spec.kernel, stride=spec.stride,
                          padding=spec.padding, bias=spec.bias)
    elif isinstance(spec, TransConvSpec):
        layer = nn.ConvTranspose2d(spec.in_ch, spec.out_ch, spec.kernel,
                                   stride=spec.stride, bias=spec.bias)
    elif isinstance(spec, BatchNormSpec):
        layer = nn.BatchNorm2d(spec.ch)
    elif isinstance(spec, ReLUSpec):
        layer = nn.ReLU()
    elif isinstance(spec, PReLUSpec):
        layer = nn.PReLU(spec.ch, init=0.25)
    elif isinstance(spec, SigmoidSpec):
        layer = nn.Sigmoid()
    elif isinstance(spec, GlobalAvgPoolSpec):
        layer = GlobalAvgPool()
    elif isinstance(spec, AvgPoolSpec):
        layer = nn.AvgPool2d(spec.kernel, spec.stride, ceil_mode=spec.ceil_mode)
    elif isinstance(spec, UpsampleSpec):
        layer = nn.Upsample(scale_factor=spec.factor, mode="nearest")
    elif isinstance(spec, DenseSpec):
        layer = nn.Linear(spec.in_features, spec.out_features, bias=spec.bias)
    elif isinstance(spec, GdnSpec):
        layer = GDN(spec.ch, inverse=spec.inverse)
    else:
        raise TypeError(f"unknown layer spec {spec!r}")
    init_weights(layer)
    return layer


def _int(v) -> int:
    return v[0] if isinstance(v, tuple) else int(v)


def spec_of(module: nn.Module) -> LayerSpec | None:
    """Describe a leaf module as a LayerSpec; ``None`` for containers."""
    if isinstance(module, nn.ConvTranspose2d):
        return TransConvSpec(module.in_channels, module.out_channels, _int(module.kernel_size),
                             _int(module.stride), module.bias is not None)
    if isinstance(module, nn.Conv2d):
        return ConvSpec(module.in_channels, module.out_channels, _int(module.kernel_size),
                        _int(module.stride), _int(module.padding), module.bias is not None)
    if isinstance(module, nn.BatchNorm2d):
        return BatchNormSpec(module.num_features)
    if isinstance(module, nn.ReLU):
        return ReLUSpec()
    if isinstance(module, nn.PReLU):
        return PReLUSpec(module.num_parameters)
    if isinstance(module, nn.Sigmoid):
        return SigmoidSpec()
    if isinstance(module, GlobalAvgPool):
        return GlobalAvgPoolSpec()
    if isinstance(module, nn.AvgPool2d):
        return AvgPoolSpec(_int(module.kernel_size), _int(module.stride), module.ceil_mode)
    if isinstance(module, nn.Upsample):
        return UpsampleSpec(int(module.scale_factor))
    if isinstance(module, nn.Linear):
        return DenseSpec(module.in_features, module.out_features, module.bias is not None)
    if isinstance(module, GDN):
        return GdnSpec(module.channels, module.inverse)
    return None


def _pool_extent(size: int, kernel: int, stride: int, padding: int, ceil_mode: bool) -> int:
    span = size + 2 * padding - kernel
    steps = math.ceil(span / stride) if ceil_mode else span // stride
    out = steps + 1
    # torch drops a last window that would start inside the right padding
    if ceil_mode and (out - 1) * stride >= size + padding:
        out -= 1
    return out


def output_shape(spec: LayerSpec, in_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Per-sample output shape (no batch axis) for a per-sample input shape.

    Raises ShapeError when the input cannot feed the layer.
    """
    in_shape = tuple(int(s) for s in in_shape)

    def need_map(ch: int | None) -> tuple[int, int, int]:
        if len(in_shape) != 3:
            raise ShapeError(f"{type(spec).__name__} expects a (C,H,W) map, got shape {in_shape}")
        if ch is not None and in_shape[0] != ch:
            raise ShapeError(f"{type(spec).__name__} expects {ch} channels, got shape {in_shape}")
        return in_shape  # type: ignore[return-value]

    if isinstance(spec, ConvSpec):
        _, h, w = need_map(spec.in_ch)
        if spec.kernel > min(h, w) + 2 * spec.padding:
            raise ShapeError(f"kernel {spec.kernel} exceeds padded input {in_shape} (padding {spec.padding})")
        ho = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
        wo = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
        return (spec.out_ch, ho, wo)
    if isinstance(spec, TransConvSpec):
        _, h, w = need_map(spec.in_ch)
        return (spec.out_ch, (h - 1) * spec.stride + spec.kernel, (w - 1) * spec.stride + spec.kernel)
    if isinstance(spec, (BatchNormSpec, PReLUSpec, GdnSpec)):
        need_map(spec.ch)
        return in_shape
    if isinstance(spec, (ReLUSpec, SigmoidSpec)):
        return in_shape
    if isinstance(spec, GlobalAvgPoolSpec):
        c, _, _ = need_map(None)
        return (c,)
    if isinstance(spec, AvgPoolSpec):
        c, h, w = need_map(None)
        if spec.kernel > min(h, w):
            raise ShapeError(f"pool kernel {spec.kernel} exceeds input {in_shape}")
        return (c, _pool_extent(h, spec.kernel, spec.stride, 0, spec.ceil_mode),
                _pool_extent(w, spec.kernel, spec.stride, 0, spec.ceil_mode))
    if isinstance(spec, UpsampleSpec):
        c, h, w = need_map(None)
        return (c, h * spec.factor, w * spec.factor)
    if isinstance(spec, DenseSpec):
        if in_shape != (spec.in_features,):
            raise ShapeError(f"Dense expects ({spec.in_features},), got shape {in_shape}")
        return (spec.out_features,)
    raise TypeError(f"unknown layer spec {spec!r}")


def forward(layer: nn.Module, x: torch.Tensor) -> torch.Tensor:
    """Run one leaf layer with input validation and an output-shape check."""
    spec = spec_of(layer)
    if spec is None:
        raise TypeError(f"{type(layer).__name__} is not a primitive layer")
    expected = output_shape(spec, tuple(x.shape[1:]))
    if not torch.isfinite(x).all():
        raise ValueError("non-finite values in layer input")
    y = layer(x)
    if tuple(y.shape[1:]) != expected:
        raise ShapeError(f"{spec} produced {tuple(y.shape[1:])}, expected {expected}")
    return y
