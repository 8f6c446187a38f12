"""Network architecture descriptions.

A :class:`NetworkSpec` is an ordered list of layer descriptors plus an input
shape and a loss name.  Specs are plain data: they shape-check themselves,
serialize to a canonical one-layer-per-line text form, and hash that text so
trained weights can be tied back to the architecture that produced them.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Union

ACTIVATIONS = ("relu", "sigmoid", "tanh")
HEADS = ("softmax", "sigmoid")
LOSSES = (
    "cross-entropy",
    "binary-cross-entropy",
    "mean-squared-error",
    "adversarial-generator",
    "adversarial-discriminator",
)
PADDINGS = ("same", "valid")


class SpecError(ValueError):
    """Raised when a network spec is malformed or its shapes do not chain."""


@dataclass(frozen=True)
class Conv:
    kernel: tuple[int, int]
    channels: int
    stride: int = 1
    padding: str = "same"

    def text(self) -> str:
        return f"conv {self.kernel[0]}x{self.kernel[1]} {self.channels} s{self.stride} {self.padding}"


@dataclass(frozen=True)
class MaxPool:
    window: int = 2
    stride: int = 2

    def text(self) -> str:
        return f"maxpool {self.window} s{self.stride}"


@dataclass(frozen=True)
class Dense:
    units: int

    def text(self) -> str:
        return f"dense {self.units}"


@dataclass(frozen=True)
class Activation:
    kind: str

    def text(self) -> str:
        return f"activation {self.kind}"


@dataclass(frozen=True)
class Flatten:
    def text(self) -> str:
        return "flatten"


@dataclass(frozen=True)
class Reshape:
    shape: tuple[int, ...]

    def text(self) -> str:
        return "reshape " + "x".join(str(d) for d in self.shape)


@dataclass(frozen=True)
class Head:
    kind: str

    def text(self) -> str:
        return f"head {self.kind}"


Layer = Union[Conv, MaxPool, Dense, Activation, Flatten, Reshape, Head]
TRAINABLE = (Conv, Dense)


def conv_geometry(size: int, kernel: int, stride: int, padding: str) -> tuple[int, int]:
    """Return ``(output size, leading pad)`` for one spatial axis."""
    if padding == "same":
        out = math.ceil(size / stride)
        total = max((out - 1) * stride + kernel - size, 0)
        return out, total // 2
    out = (size - kernel) // stride + 1
    return out, 0


def _layer_output(layer: Layer, shape: tuple[int, ...]) -> tuple[int, ...]:
    if isinstance(layer, Conv):
        if len(shape) != 3:
            raise SpecError("conv needs a (height, width, channels) input")
        kh, kw = layer.kernel
        if min(kh, kw, layer.channels, layer.stride) < 1:
            raise SpecError("conv kernel, channels and stride must be positive")
        if layer.padding not in PADDINGS:
            raise SpecError(f"unknown padding {layer.padding!r}")
        h, _ = conv_geometry(shape[0], kh, layer.stride, layer.padding)
        w, _ = conv_geometry(shape[1], kw, layer.stride, layer.padding)
        if h < 1 or w < 1:
            raise SpecError(f"conv kernel larger than input {shape}")
        return (h, w, layer.channels)
    if isinstance(layer, MaxPool):
        if len(shape) != 3:
            raise SpecError("maxpool needs a (height, width, channels) input")
        h = (shape[0] - layer.window) // layer.stride + 1
        w = (shape[1] - layer.window) // layer.stride + 1
        if layer.window < 1 or layer.stride < 1 or h < 1 or w < 1:
            raise SpecError(f"maxpool window does not fit input {shape}")
        return (h, w, shape[2])
    if isinstance(layer, Dense):
        if len(shape) != 1:
            raise SpecError(f"dense needs a flat input, got {shape}; insert flatten")
        if layer.units < 1:
            raise SpecError("dense units must be positive")
        return (layer.units,)
    if isinstance(layer, Activation):
        if layer.kind not in ACTIVATIONS:
            raise SpecError(f"unknown activation {layer.kind!r}")
        return shape
    if isinstance(layer, Flatten):
        return (math.prod(shape),)
    if isinstance(layer, Reshape):
        if math.prod(layer.shape) != math.prod(shape):
            raise SpecError(f"cannot reshape {shape} to {layer.shape}")
        return tuple(layer.shape)
    if isinstance(layer, Head):
        if layer.kind not in HEADS:
            raise SpecError(f"unknown head {layer.kind!r}")
        if layer.kind == "softmax" and len(shape) != 1:
            raise SpecError("softmax head needs a flat input")
        return shape
    raise SpecError(f"unknown layer descriptor {layer!r}")


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple[int, int, int]
    layers: tuple[Layer, ...]
    loss: str

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.shapes()

    def shapes(self) -> list[tuple[int, ...]]:
        """Output shape of every layer, checking the chain as it goes."""
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise SpecError(f"input_shape must be (height, width, channels), got {self.input_shape}")
        if self.loss not in LOSSES:
            raise SpecError(f"unknown loss {self.loss!r}")
        if not any(isinstance(layer, TRAINABLE) for layer in self.layers):
            raise SpecError("network has no trainable layer")
        out = []
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Head) and i != len(self.layers) - 1:
                raise SpecError(f"layer {i} ({layer.text()}): head must be the last layer")
            try:
                shape = _layer_output(layer, shape)
            except SpecError as exc:
                text = layer.text() if hasattr(layer, "text") else repr(layer)
                raise SpecError(f"layer {i} ({text}): {exc}") from None
            out.append(shape)
        head = self.head
        if self.loss == "cross-entropy" and head != "softmax":
            raise SpecError("cross-entropy loss requires a softmax head")
        if self.loss in ("binary-cross-entropy", "adversarial-discriminator") and head != "sigmoid":
            raise SpecError(f"{self.loss} loss requires a sigmoid head")
        return out

    @property
    def head(self) -> str | None:
        if self.layers and isinstance(self.layers[-1], Head):
            return self.layers[-1].kind
        return None

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes()[-1]

    def canonical(self) -> str:
        lines = ["input " + "x".join(str(d) for d in self.input_shape)]
        lines += [layer.text() for layer in self.layers]
        lines.append(f"loss {self.loss}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]


def parse_spec(text: str) -> NetworkSpec:
    """Inverse of :meth:`NetworkSpec.canonical`."""
    input_shape = None
    loss = None
    layers: list[Layer] = []
    for raw in text.strip().splitlines():
        word, _, rest = raw.strip().partition(" ")
        args = rest.split()
        if word == "input":
            input_shape = tuple(int(d) for d in args[0].split("x"))
        elif word == "loss":
            loss = args[0]
        elif word == "conv":
            kh, kw = (int(d) for d in args[0].split("x"))
            layers.append(Conv((kh, kw), int(args[1]), int(args[2][1:]), args[3]))
        elif word == "maxpool":
            layers.append(MaxPool(int(args[0]), int(args[1][1:])))
        elif word == "dense":
            layers.append(Dense(int(args[0])))
        elif word == "activation":
            layers.append(Activation(args[0]))
        elif word == "flatten":
            layers.append(Flatten())
        elif word == "reshape":
            layers.append(Reshape(tuple(int(d) for d in args[0].split("x"))))
        elif word == "head":
            layers.append(Head(args[0]))
        else:
            raise SpecError(f"cannot parse spec line {raw!r}")
    if input_shape is None or loss is None:
        raise SpecError("spec text lacks an input or loss line")
    return NetworkSpec(input_shape, tuple(layers), loss)


def vgg_spec(
    input_shape=(64, 64, 1),
    n_classes: int = 2,
    widths=(8, 16, 32),
    dense_units: int = 64,
    convs_per_block: int = 2,
) -> NetworkSpec:
    """Reduced VGG: ``[conv3x3-relu] * n -> maxpool`` blocks, then a small dense head."""
    layers: list[Layer] = []
    for width in widths:
        for _ in range(convs_per_block):
            layers += [Conv((3, 3), width), Activation("relu")]
        layers.append(MaxPool(2, 2))
    layers += [Flatten(), Dense(dense_units), Activation("relu"), Dense(n_classes), Head("softmax")]
    return NetworkSpec(tuple(input_shape), tuple(layers), "cross-entropy")


def reconstructor_spec(input_shape=(64, 64, 1), code_units: int = 64) -> NetworkSpec:
    """Encoder-decoder mapping an image to an image of the same shape.

    The encoder is a strided conv stack; the decoder is a dense layer back to
    full resolution, so the bottleneck forces reconstructions toward the
    training distribution.
    """
    h, w, c = input_shape
    layers = (
        Conv((3, 3), 8, stride=2),
        Activation("relu"),
        Conv((3, 3), 16, stride=2),
        Activation("relu"),
        Flatten(),
        Dense(code_units),
        Activation("relu"),
        Dense(h * w * c),
        Reshape((h, w, c)),
        Head("sigmoid"),
    )
    return NetworkSpec(tuple(input_shape), layers, "adversarial-generator")


def discriminator_spec(input_shape=(64, 64, 1), widths=(8, 16)) -> NetworkSpec:
    layers: list[Layer] = []
    for width in widths:
        layers += [Conv((3, 3), width, stride=2), Activation("relu")]
    layers += [MaxPool(2, 2), Flatten(), Dense(32), Activation("relu"), Dense(1), Head("sigmoid")]
    return NetworkSpec(tuple(input_shape), tuple(layers), "adversarial-discriminator")
