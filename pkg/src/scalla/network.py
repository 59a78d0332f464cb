"""Network specifications and flat parameter vectors.

A network is an ordered sequence of layer descriptors applied to a fixed
input shape. All parameters live in a single flat float64 vector; the
layout maps each weight/bias block back to its owning layer, so the flat
vector, the differentiation engine, and the checkpoint format agree on
offsets without copying.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from math import prod

import numpy as np


class ShapeError(ValueError):
    """Layer shapes do not compose, or an input/parameter has the wrong shape."""


@dataclass(frozen=True)
class Dense:
    """Affine layer. ``bias=False`` gives a pure linear map (used by oracles)."""

    in_dim: int
    out_dim: int
    bias: bool = True


@dataclass(frozen=True)
class Conv2d:
    """Square-kernel 2-D convolution, stride 1, valid padding, with bias."""

    in_channels: int
    out_channels: int
    kernel: int


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class Tanh:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


Layer = Dense | Conv2d | Relu | Tanh | Flatten


def layer_name(index: int, layer: Layer) -> str:
    return f"layer{index}({type(layer).__name__.lower()})"


def _apply_shape(layer: Layer, shape: tuple[int, ...], index: int) -> tuple[int, ...]:
    """Shape after `layer` given input `shape`; raises ShapeError naming the layer."""
    if isinstance(layer, Dense):
        if shape != (layer.in_dim,):
            raise ShapeError(
                f"{layer_name(index, layer)}: expected input shape ({layer.in_dim},), got {shape}"
            )
        return (layer.out_dim,)
    if isinstance(layer, Conv2d):
        if len(shape) != 3 or shape[0] != layer.in_channels:
            raise ShapeError(
                f"{layer_name(index, layer)}: expected (channels={layer.in_channels}, h, w), got {shape}"
            )
        _, h, w = shape
        if h < layer.kernel or w < layer.kernel:
            raise ShapeError(
                f"{layer_name(index, layer)}: kernel {layer.kernel} larger than input {h}x{w}"
            )
        return (layer.out_channels, h - layer.kernel + 1, w - layer.kernel + 1)
    if isinstance(layer, Flatten):
        return (prod(shape),)
    if isinstance(layer, (Relu, Tanh)):
        return shape
    raise ShapeError(f"unknown layer type {type(layer).__name__}")


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture description: layers, input shape, and output dimension C."""

    layers: tuple[Layer, ...]
    input_shape: tuple[int, ...]
    output_dim: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.output_dim < 1:
            raise ShapeError(f"output_dim must be >= 1, got {self.output_dim}")
        final = self.shapes()[-1]
        if final != (self.output_dim,):
            raise ShapeError(
                f"layers produce output shape {final}, expected ({self.output_dim},)"
            )

    def shapes(self) -> list[tuple[int, ...]]:
        """Intermediate shapes: shapes()[i] is the input shape of layer i."""
        shape = self.input_shape
        out = [shape]
        for i, layer in enumerate(self.layers):
            shape = _apply_shape(layer, shape, i)
            out.append(shape)
        return out

    @property
    def param_count(self) -> int:
        return sum(e.size for e in param_layout(self))


@dataclass(frozen=True)
class LayoutEntry:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return prod(self.shape)


@lru_cache(maxsize=None)
def param_layout(spec: NetworkSpec) -> tuple[LayoutEntry, ...]:
    """Contiguous (name, shape, offset) blocks in layer order, weights before biases."""
    entries = []
    offset = 0
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            entries.append(LayoutEntry(f"layer{i}.weight", (layer.out_dim, layer.in_dim), offset))
            offset += layer.out_dim * layer.in_dim
            if layer.bias:
                entries.append(LayoutEntry(f"layer{i}.bias", (layer.out_dim,), offset))
                offset += layer.out_dim
        elif isinstance(layer, Conv2d):
            wshape = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
            entries.append(LayoutEntry(f"layer{i}.weight", wshape, offset))
            offset += prod(wshape)
            entries.append(LayoutEntry(f"layer{i}.bias", (layer.out_channels,), offset))
            offset += layer.out_channels
    return tuple(entries)


@dataclass(frozen=True)
class ParamVector:
    """Flat float64 parameter vector plus the layout mapping back to layers."""

    values: np.ndarray
    layout: tuple[LayoutEntry, ...] = field(repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layout", tuple(self.layout))
        offset = 0
        for entry in self.layout:
            if entry.offset != offset:
                raise ShapeError(f"layout entry {entry.name} at offset {entry.offset}, expected {offset}")
            offset += entry.size
        if values.shape != (offset,):
            raise ShapeError(f"parameter vector has {values.shape} values, layout covers {offset}")

    @property
    def size(self) -> int:
        return self.values.size

    def block(self, name: str) -> np.ndarray:
        for entry in self.layout:
            if entry.name == name:
                return self.values[entry.offset : entry.offset + entry.size].reshape(entry.shape)
        raise KeyError(name)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {e.name: self.values[e.offset : e.offset + e.size].reshape(e.shape) for e in self.layout}

    def replace_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.layout)


@dataclass(frozen=True)
class TangentVector:
    """Parameter-space direction; the tag records how it was drawn."""

    values: np.ndarray
    distribution: str = "deterministic"  # gaussian | rademacher | deterministic

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        if self.distribution not in ("gaussian", "rademacher", "deterministic"):
            raise ValueError(f"unknown distribution tag {self.distribution!r}")


def mlp_spec(
    in_dim: int,
    hidden: tuple[int, ...],
    out_dim: int,
    activation: str = "tanh",
) -> NetworkSpec:
    """Fully-connected spec with the given hidden widths and activation."""
    act = {"tanh": Tanh, "relu": Relu}[activation]
    layers: list[Layer] = []
    dims = (in_dim, *hidden)
    for a, b in zip(dims[:-1], dims[1:]):
        layers.extend([Dense(a, b), act()])
    layers.append(Dense(dims[-1], out_dim))
    return NetworkSpec(tuple(layers), (in_dim,), out_dim)
