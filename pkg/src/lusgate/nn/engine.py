"""Forward and reverse passes for :class:`~lusgate.nn.spec.NetworkSpec` networks.

Tensors are NHWC.  The engine is functional: :func:`run` returns the
pre-head outputs and a tape of per-layer caches, :func:`backward` consumes
the tape.  Parameters never mutate in place; training produces new
:class:`ModelParams`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .spec import (
    Activation,
    Conv,
    Dense,
    Flatten,
    Head,
    MaxPool,
    NetworkSpec,
    Reshape,
    SpecError,
    conv_geometry,
)


class NumericError(FloatingPointError):
    """A non-finite value appeared in a forward pass or loss."""


@dataclass(frozen=True)
class ModelParams:
    """Weights for one network.

    ``weights[i]`` is ``(W, b)`` for conv/dense layers and ``()`` otherwise.
    """

    spec: NetworkSpec
    weights: tuple[tuple[np.ndarray, ...], ...]
    train_meta: dict = field(default_factory=dict)

    @property
    def spec_hash(self) -> str:
        return self.spec.hash()

    @property
    def dtype(self):
        for w in self.weights:
            if w:
                return w[0].dtype
        return np.dtype(np.float64)

    def astype(self, dtype) -> "ModelParams":
        weights = tuple(tuple(a.astype(dtype) for a in w) for w in self.weights)
        return replace(self, weights=weights)

    def with_weights(self, weights, **meta) -> "ModelParams":
        return ModelParams(self.spec, tuple(tuple(w) for w in weights), {**self.train_meta, **meta})

    def flat(self) -> list[np.ndarray]:
        return [a for w in self.weights for a in w]

    def validate(self) -> None:
        shapes = param_shapes(self.spec)
        if len(shapes) != len(self.weights):
            raise SpecError("weight list does not match layer count")
        for i, (want, got) in enumerate(zip(shapes, self.weights)):
            if tuple(a.shape for a in got) != want:
                raise SpecError(f"layer {i}: weight shapes {[a.shape for a in got]} != {list(want)}")
            for a in got:
                if not np.isfinite(a).all():
                    raise NumericError(f"layer {i}: non-finite weights")


def param_shapes(spec: NetworkSpec) -> list[tuple[tuple[int, ...], ...]]:
    shapes = []
    in_shape = spec.input_shape
    for layer, out_shape in zip(spec.layers, spec.shapes()):
        if isinstance(layer, Conv):
            kh, kw = layer.kernel
            shapes.append(((kh, kw, in_shape[-1], layer.channels), (layer.channels,)))
        elif isinstance(layer, Dense):
            shapes.append(((in_shape[0], layer.units), (layer.units,)))
        else:
            shapes.append(())
        in_shape = out_shape
    return shapes


def _next_activation(spec: NetworkSpec, i: int) -> str | None:
    for layer in spec.layers[i + 1:]:
        if isinstance(layer, Activation):
            return layer.kind
        if isinstance(layer, Head):
            return layer.kind
        if isinstance(layer, (Conv, Dense)):
            return None
    return None


def build_network(spec: NetworkSpec, seed: int, dtype=np.float64) -> ModelParams:
    """Initialise weights: He-normal ahead of relu, Glorot-normal otherwise, zero biases."""
    rng = np.random.default_rng(seed)
    weights = []
    for i, shapes in enumerate(param_shapes(spec)):
        if not shapes:
            weights.append(())
            continue
        w_shape, b_shape = shapes
        fan_in = math.prod(w_shape[:-1])
        fan_out = w_shape[-1] * (math.prod(w_shape[:-2]) if len(w_shape) == 4 else 1)
        if _next_activation(spec, i) == "relu":
            std = math.sqrt(2.0 / fan_in)
        else:
            std = math.sqrt(2.0 / (fan_in + fan_out))
        w = (rng.standard_normal(w_shape) * std).astype(dtype)
        weights.append((w, np.zeros(b_shape, dtype=dtype)))
    return ModelParams(spec, tuple(weights), {"seed": int(seed), "epochs": 0})


# -- layer kernels ---------------------------------------------------------


def _pad(x, layer: Conv):
    h, w = x.shape[1:3]
    kh, kw = layer.kernel
    oh, top = conv_geometry(h, kh, layer.stride, layer.padding)
    ow, left = conv_geometry(w, kw, layer.stride, layer.padding)
    if layer.padding == "valid":
        return x, oh, ow, (0, 0)
    bottom = max((oh - 1) * layer.stride + kh - h - top, 0)
    right = max((ow - 1) * layer.stride + kw - w - left, 0)
    if top or bottom or left or right:
        x = np.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0)))
    return x, oh, ow, (top, left)


def _conv_forward(x, W, b, layer: Conv):
    xp, oh, ow, offsets = _pad(x, layer)
    s = layer.stride
    kh, kw = layer.kernel
    out = np.zeros((x.shape[0], oh, ow, W.shape[-1]), dtype=x.dtype)
    for a in range(kh):
        for c in range(kw):
            out += xp[:, a:a + s * oh:s, c:c + s * ow:s, :] @ W[a, c]
    out += b
    return out, (xp, offsets)


def _conv_backward(g, cache, x_shape, W, layer: Conv):
    xp, (top, left) = cache
    s = layer.stride
    kh, kw = layer.kernel
    oh, ow = g.shape[1:3]
    dW = np.empty_like(W)
    dxp = np.zeros_like(xp)
    g2 = g.reshape(-1, g.shape[-1])
    for a in range(kh):
        for c in range(kw):
            window = xp[:, a:a + s * oh:s, c:c + s * ow:s, :]
            dW[a, c] = window.reshape(-1, window.shape[-1]).T @ g2
            dxp[:, a:a + s * oh:s, c:c + s * ow:s, :] += g @ W[a, c].T
    db = g2.sum(axis=0)
    dx = dxp[:, top:top + x_shape[1], left:left + x_shape[2], :]
    return dW, db, dx


def _pool_forward(x, layer: MaxPool):
    k, s = layer.window, layer.stride
    oh = (x.shape[1] - k) // s + 1
    ow = (x.shape[2] - k) // s + 1
    best = None
    arg = np.zeros((x.shape[0], oh, ow, x.shape[3]), dtype=np.int32)
    for a in range(k):
        for c in range(k):
            v = x[:, a:a + s * oh:s, c:c + s * ow:s, :]
            if best is None:
                best = v.copy()
                continue
            better = v > best
            best = np.where(better, v, best)
            arg[better] = a * k + c
    return best, arg


def _pool_backward(g, arg, x_shape, layer: MaxPool):
    k, s = layer.window, layer.stride
    oh, ow = g.shape[1:3]
    dx = np.zeros(x_shape, dtype=g.dtype)
    for a in range(k):
        for c in range(k):
            dx[:, a:a + s * oh:s, c:c + s * ow:s, :] += np.where(arg == a * k + c, g, 0)
    return dx


def sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def apply_head(kind: str | None, logits):
    if kind == "softmax":
        return softmax(logits)
    if kind == "sigmoid":
        return sigmoid(logits)
    return logits


# -- passes ----------------------------------------------------------------


@dataclass
class Tape:
    inputs: list
    caches: list
    guided: bool = False


def _as_batch(params: ModelParams, batch) -> np.ndarray:
    x = np.asarray(batch, dtype=params.dtype)
    want = params.spec.input_shape
    if x.ndim == 3 and want[2] == 1 and x.shape[1:] == want[:2]:
        x = x[..., None]
    elif x.ndim == 2 and want[2] == 1 and x.shape == want[:2]:
        x = x[None, ..., None]
    if x.shape[1:] != want:
        raise SpecError(f"batch shape {x.shape[1:]} does not match input shape {want}")
    return x


def run(params: ModelParams, batch, *, guided: bool = False, check: bool = True):
    """Run every layer except the head; return ``(logits, tape)``."""
    x = _as_batch(params, batch)
    tape = Tape([], [], guided)
    spec = params.spec
    for i, (layer, w) in enumerate(zip(spec.layers, params.weights)):
        if isinstance(layer, Head):
            break
        tape.inputs.append(x)
        cache = None
        if isinstance(layer, Conv):
            x, cache = _conv_forward(x, w[0], w[1], layer)
        elif isinstance(layer, Dense):
            x = x @ w[0] + w[1]
        elif isinstance(layer, MaxPool):
            x, cache = _pool_forward(x, layer)
        elif isinstance(layer, Activation):
            if layer.kind == "relu":
                x = np.maximum(x, 0)
            elif layer.kind == "sigmoid":
                x = sigmoid(x)
            else:
                x = np.tanh(x)
            cache = x
        elif isinstance(layer, Flatten):
            x = x.reshape(x.shape[0], -1)
        elif isinstance(layer, Reshape):
            x = x.reshape((x.shape[0],) + layer.shape)
        tape.caches.append(cache)
        if check and not np.isfinite(x).all():
            raise NumericError(f"non-finite output at layer {i} ({layer.text()})")
    return x, tape


def forward(params: ModelParams, batch) -> np.ndarray:
    """Head outputs (probabilities or images) for a batch of frames."""
    logits, _ = run(params, batch)
    return apply_head(params.spec.head, logits)


def backward(params: ModelParams, tape: Tape, grad, *, collect: bool = False):
    """Back-propagate ``grad`` (w.r.t. the pre-head output).

    Returns ``(param_grads, input_grad)``; with ``collect=True`` a third item
    lists the gradient w.r.t. every layer's output.
    """
    spec = params.spec
    n = len(tape.inputs)
    grads: list = [()] * len(spec.layers)
    outs = [None] * n
    g = grad
    for i in range(n - 1, -1, -1):
        layer = spec.layers[i]
        if collect:
            outs[i] = g
        x = tape.inputs[i]
        cache = tape.caches[i]
        if isinstance(layer, Conv):
            W = params.weights[i][0]
            dW, db, g = _conv_backward(g, cache, x.shape, W, layer)
            grads[i] = (dW, db)
        elif isinstance(layer, Dense):
            W = params.weights[i][0]
            grads[i] = (x.T @ g, g.sum(axis=0))
            g = g @ W.T
        elif isinstance(layer, MaxPool):
            g = _pool_backward(g, cache, x.shape, layer)
        elif isinstance(layer, Activation):
            if layer.kind == "relu":
                mask = x > 0
                if tape.guided:
                    mask = mask & (g > 0)
                g = g * mask
            elif layer.kind == "sigmoid":
                g = g * cache * (1 - cache)
            else:
                g = g * (1 - cache * cache)
        elif isinstance(layer, (Flatten, Reshape)):
            g = g.reshape(x.shape)
    if collect:
        return grads, g, outs
    return grads, g


# -- losses ----------------------------------------------------------------


def loss_and_grad(spec: NetworkSpec, logits, targets, sample_weights=None, loss: str | None = None):
    """Mean (optionally weighted) loss and its gradient w.r.t. the logits.

    ``cross-entropy`` takes integer class targets; ``binary-cross-entropy``
    and the adversarial roles take targets in [0, 1] shaped like the
    output; ``mean-squared-error`` compares the head output to ``targets``
    and sums over each item's elements.
    """
    loss = loss or spec.loss
    n = logits.shape[0]
    w = np.ones(n, dtype=logits.dtype) if sample_weights is None else np.asarray(sample_weights, logits.dtype)
    norm = w.sum()
    if loss == "cross-entropy":
        targets = np.asarray(targets, dtype=int)
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        per = -logp[np.arange(n), targets]
        g = np.exp(logp)
        g[np.arange(n), targets] -= 1
    elif loss in ("binary-cross-entropy", "adversarial-discriminator", "adversarial-generator"):
        t = np.asarray(targets, dtype=logits.dtype).reshape(logits.shape)
        # log(1 + exp(-|z|)) form keeps large logits finite
        per_el = np.maximum(logits, 0) - logits * t + np.log1p(np.exp(-np.abs(logits)))
        per = per_el.reshape(n, -1).mean(axis=1)
        g = (sigmoid(logits) - t) / per_el[0].size
    elif loss == "mean-squared-error":
        t = np.asarray(targets, dtype=logits.dtype).reshape(logits.shape)
        out = apply_head(spec.head, logits)
        diff = out - t
        per = (diff * diff).reshape(n, -1).sum(axis=1)
        g = 2 * diff
        if spec.head == "sigmoid":
            g = g * out * (1 - out)
        elif spec.head == "softmax":
            raise SpecError("mean-squared-error through a softmax head is not supported")
    else:
        raise SpecError(f"unknown loss {loss!r}")
    value = float((w * per).sum() / norm)
    if not math.isfinite(value):
        raise NumericError("loss is not finite")
    g = g * (w / norm).reshape((n,) + (1,) * (g.ndim - 1))
    return value, g
