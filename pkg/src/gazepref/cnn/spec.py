"""Layer descriptors, shape propagation and parameter counting."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class Conv:
    filters: int
    kernel: int
    stride: int = 1


@dataclass(frozen=True)
class MaxPool:
    size: int
    stride: int


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class Dropout:
    p: float

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise SpecError(f"dropout p must be in [0, 1), got {self.p}")


@dataclass(frozen=True)
class Fc:
    units: int


@dataclass(frozen=True)
class SoftmaxOut:
    """Fully connected projection to ``classes`` logits followed by softmax."""

    classes: int


Layer = Union[Conv, MaxPool, Relu, Dropout, Fc, SoftmaxOut]
Shape = tuple  # (C, H, W) before flattening, (D,) after


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[Layer, ...]
    input_shape: tuple[int, int, int] = (1, 72, 72)

    def __post_init__(self):
        self.shapes()  # validates the chain

    @property
    def classes(self) -> int:
        return self.layers[-1].classes

    def shapes(self) -> list[Shape]:
        """Output shape of every layer, in order."""
        if not self.layers or not isinstance(self.layers[-1], SoftmaxOut):
            raise SpecError("last layer must be SoftmaxOut")
        if any(isinstance(l, SoftmaxOut) for l in self.layers[:-1]):
            raise SpecError("SoftmaxOut may only appear last")
        shape: Shape = tuple(self.input_shape)
        out = []
        for i, layer in enumerate(self.layers):
            shape = _next_shape(layer, shape, i)
            out.append(shape)
        return out

    def in_shapes(self) -> list[Shape]:
        return [tuple(self.input_shape)] + self.shapes()[:-1]


def _next_shape(layer: Layer, shape: Shape, i: int) -> Shape:
    if isinstance(layer, (Conv, MaxPool)):
        if len(shape) != 3:
            raise SpecError(f"layer {i}: {type(layer).__name__} after flattening")
        c, h, w = shape
        k, s = (layer.kernel, layer.stride) if isinstance(layer, Conv) else (layer.size, layer.stride)
        if k < 1 or s < 1 or k > h or k > w:
            raise SpecError(f"layer {i}: window {k} stride {s} does not fit {h}x{w}")
        ho, wo = (h - k) // s + 1, (w - k) // s + 1
        return (layer.filters, ho, wo) if isinstance(layer, Conv) else (c, ho, wo)
    if isinstance(layer, (Relu, Dropout)):
        return shape
    if isinstance(layer, Fc):
        if layer.units < 1:
            raise SpecError(f"layer {i}: Fc needs units >= 1")
        return (layer.units,)
    if isinstance(layer, SoftmaxOut):
        if layer.classes < 2:
            raise SpecError(f"layer {i}: SoftmaxOut needs >= 2 classes")
        return (layer.classes,)
    raise SpecError(f"layer {i}: unknown layer {layer!r}")


def _flat(shape: Shape) -> int:
    n = 1
    for d in shape:
        n *= d
    return n


def param_shapes(spec: NetworkSpec) -> list[tuple[tuple[int, ...], tuple[int, ...]] | None]:
    """(weight shape, bias shape) per layer, None for parameter-free layers."""
    out = []
    for layer, in_shape in zip(spec.layers, spec.in_shapes()):
        if isinstance(layer, Conv):
            out.append(((layer.filters, in_shape[0], layer.kernel, layer.kernel), (layer.filters,)))
        elif isinstance(layer, Fc):
            out.append(((layer.units, _flat(in_shape)), (layer.units,)))
        elif isinstance(layer, SoftmaxOut):
            out.append(((layer.classes, _flat(in_shape)), (layer.classes,)))
        else:
            out.append(None)
    return out


def param_count(spec: NetworkSpec) -> int:
    total = 0
    for shapes in param_shapes(spec):
        if shapes is not None:
            total += _flat(shapes[0]) + _flat(shapes[1])
    return total


def reference_spec(classes: int = 3, dropout: float = 0.5) -> NetworkSpec:
    """Two conv/pool blocks, dropout, FC-120 and a softmax output (63,233 params for 3 classes)."""
    if classes not in (2, 3):
        raise SpecError("reference network supports 2 or 3 classes")
    return NetworkSpec((
        Conv(6, 5), Relu(), MaxPool(3, 3),
        Conv(14, 5), Relu(), MaxPool(3, 3),
        Dropout(dropout), Fc(120), Relu(),
        SoftmaxOut(classes),
    ))
