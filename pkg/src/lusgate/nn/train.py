"""Mini-batch SGD training and finite-difference gradient checking."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass
from typing import Sequence, Union

import numpy as np

from .engine import ModelParams, NumericError, backward, loss_and_grad, run

log = logging.getLogger(__name__)

ClassWeights = Union[None, str, Sequence[float]]


@dataclass(frozen=True)
class Hyperparams:
    learning_rate: float = 0.01
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    optimizer: str = "sgd-momentum"
    momentum: float = 0.9
    class_weights: ClassWeights = "balanced"
    oversample: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be a positive integer")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("sgd", "sgd-momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if isinstance(self.class_weights, str) and self.class_weights != "balanced":
            raise ValueError("class_weights must be None, 'balanced' or a sequence")
        if self.class_weights is not None and not isinstance(self.class_weights, str):
            if any(w <= 0 for w in self.class_weights):
                raise ValueError("class weights must be positive")
            object.__setattr__(self, "class_weights", tuple(float(w) for w in self.class_weights))

    def to_dict(self) -> dict:
        return asdict(self)


class Optimizer:
    """Plain SGD, optionally with heavy-ball momentum."""

    def __init__(self, params: ModelParams, hyper: Hyperparams):
        self.lr = hyper.learning_rate
        self.beta = hyper.momentum if hyper.optimizer == "sgd-momentum" else 0.0
        self.weights = [[a.copy() for a in w] for w in params.weights]
        self.velocity = [[np.zeros_like(a) for a in w] for w in params.weights]

    def step(self, grads) -> None:
        for ws, vs, gs in zip(self.weights, self.velocity, grads):
            for w, v, g in zip(ws, vs, gs):
                if self.beta:
                    v *= self.beta
                    v += g
                    w -= self.lr * v
                else:
                    w -= self.lr * g


def class_weight_vector(labels: np.ndarray, n_classes: int, spec: ClassWeights) -> np.ndarray:
    if spec is None:
        return np.ones(n_classes)
    if isinstance(spec, str):
        counts = np.bincount(labels, minlength=n_classes).astype(float)
        present = counts > 0
        weights = np.ones(n_classes)
        weights[present] = len(labels) / (present.sum() * counts[present])
        return weights
    weights = np.asarray(spec, dtype=float)
    if weights.shape != (n_classes,):
        raise ValueError(f"expected {n_classes} class weights, got {len(weights)}")
    return weights


def _oversample_order(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Indices with every class repeated up to the size of the largest class."""
    classes, counts = np.unique(labels, return_counts=True)
    target = counts.max()
    parts = []
    for c in classes:
        idx = np.flatnonzero(labels == c)
        reps = rng.choice(idx, size=target - len(idx), replace=True) if len(idx) < target else idx[:0]
        parts.append(np.concatenate([idx, reps]))
    return np.concatenate(parts)


def train_supervised(
    params: ModelParams,
    x: np.ndarray,
    y: np.ndarray,
    hyper: Hyperparams,
    *,
    loss: str | None = None,
) -> tuple[ModelParams, list[float]]:
    """Train on ``(x, y)`` and return new params with the per-epoch mean loss.

    The data order is a pure function of ``hyper.seed``.  Class weighting and
    oversampling only apply to cross-entropy training.
    """
    loss = loss or params.spec.loss
    x = np.asarray(x)
    if len(x) == 0:
        raise ValueError("empty dataset")
    if len(x) != len(y):
        raise ValueError("inputs and targets differ in length")
    dtype = np.dtype(hyper.dtype)
    params = params.astype(dtype)
    x = x.astype(dtype, copy=False)
    rng = np.random.default_rng(hyper.seed)

    sample_w = None
    base_order = np.arange(len(x))
    if loss == "cross-entropy":
        y = np.asarray(y, dtype=int)
        n_classes = params.spec.output_shape[0]
        if len(np.unique(y)) < 2:
            warnings.warn("single-class training set for cross-entropy loss", RuntimeWarning, stacklevel=2)
        if hyper.oversample:
            base_order = _oversample_order(y, rng)
            sample_w = np.ones(len(x))
        else:
            sample_w = class_weight_vector(y, n_classes, hyper.class_weights)[y]
    else:
        y = np.asarray(y, dtype=dtype)

    flush = np.finfo(dtype).tiny / np.finfo(dtype).eps
    opt = Optimizer(params, hyper)
    history = []
    for epoch in range(hyper.epochs):
        order = rng.permutation(base_order)
        total, seen = 0.0, 0
        for start in range(0, len(order), hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            current = params.with_weights(opt.weights)
            logits, tape = run(current, x[idx], check=False)
            sw = None if sample_w is None else sample_w[idx]
            value, g = loss_and_grad(current.spec, logits, y[idx], sw, loss)
            # near-subnormal gradients of confident predictions stall float32 math
            g[np.abs(g) < flush] = 0
            grads, _ = backward(current, tape, g)
            opt.step(grads)
            total += value * len(idx)
            seen += len(idx)
        mean = total / seen
        if not math.isfinite(mean):
            raise NumericError(f"training diverged at epoch {epoch}")
        history.append(mean)
        log.debug("epoch %d loss %.6f", epoch, mean)

    meta = {"seed": int(hyper.seed), "epochs": int(hyper.epochs), "final_loss": history[-1]}
    return params.with_weights(opt.weights, **meta), history


def _loss_and_pattern(params, x, y, loss):
    """Loss plus the on/off pattern of every relu and the winners of every max-pool."""
    from .spec import Activation, MaxPool

    logits, tape = run(params, x)
    value, _ = loss_and_grad(params.spec, logits, y, None, loss)
    pattern = []
    for layer, inp, cache in zip(params.spec.layers, tape.inputs, tape.caches):
        if isinstance(layer, Activation) and layer.kind == "relu":
            pattern.append(inp > 0)
        elif isinstance(layer, MaxPool):
            pattern.append(cache)
    return value, pattern


def _same(a, b) -> bool:
    return all(np.array_equal(u, v) for u, v in zip(a, b))


def gradient_check(
    params: ModelParams,
    x,
    y,
    epsilon: float = 1e-4,
    *,
    n_samples: int = 100,
    seed: int = 0,
    loss: str | None = None,
) -> float:
    """Max relative error between back-propagated and central-difference gradients.

    Up to ``n_samples`` scalar weights are drawn uniformly over all trainable
    entries, in double precision.  A central difference is only meaningful
    where the loss is smooth, so a draw whose perturbation flips a relu or
    changes a max-pool winner is skipped and the next candidate tried.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    params = params.astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    logits, tape = run(params, x)
    _, g = loss_and_grad(params.spec, logits, y, None, loss)
    analytic, _ = backward(params, tape, g)

    slots = [(i, j) for i, w in enumerate(params.weights) for j in range(len(w))]
    sizes = np.array([params.weights[i][j].size for i, j in slots])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    candidates = rng.permutation(total)
    bounds = np.cumsum(sizes)

    weights = [[a.copy() for a in w] for w in params.weights]
    worst = 0.0
    checked = skipped = 0
    for fid in candidates:
        if checked >= n_samples:
            break
        slot = int(np.searchsorted(bounds, fid, side="right"))
        i, j = slots[slot]
        k = int(fid - (bounds[slot] - sizes[slot]))
        arr = weights[i][j].reshape(-1)
        orig = arr[k]
        arr[k] = orig + epsilon
        up, pat_up = _loss_and_pattern(params.with_weights(weights), x, y, loss)
        arr[k] = orig - epsilon
        down, pat_down = _loss_and_pattern(params.with_weights(weights), x, y, loss)
        arr[k] = orig
        if not (math.isfinite(up) and math.isfinite(down)):
            raise NumericError("non-finite loss during gradient check")
        if not _same(pat_up, pat_down):
            skipped += 1
            continue
        numeric = (up - down) / (2 * epsilon)
        exact = float(analytic[i][j].reshape(-1)[k])
        err = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-8)
        worst = max(worst, err)
        checked += 1
    log.debug("gradient check: %d weights checked, %d skipped at kinks", checked, skipped)
    if checked == 0:
        raise NumericError("every sampled weight sits at a kink; use a smaller epsilon")
    return worst
