"""Image-quality assessment: supervised, one-class, and model-averaged scorers.

Three ways of producing a sufficient-quality probability for a frame:

* ``bin``     a VGG-style two-class classifier trained on labelled frames
* ``nd``      an adversarially trained reconstructor/discriminator pair fitted
              to sufficient frames only; the score is the discriminator's
              verdict on the reconstruction
* ``bin+nd``  the prior-weighted average of the two, with priors set by the
              relative sizes of the two training sets
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dataset import Frame, FrameLabel
from .nn import (
    Hyperparams,
    ModelParams,
    NumericError,
    build_network,
    discriminator_spec,
    forward,
    load_model,
    loss_and_grad,
    reconstructor_spec,
    run,
    save_model,
    train_supervised,
    vgg_spec,
)
from .nn.engine import backward, sigmoid
from .nn.train import Optimizer

log = logging.getLogger(__name__)

VARIANTS = ("bin", "nd", "bin+nd")
SUFFICIENT = 1  # class index of "sufficient" in the QA classifier head

QA_BIN_HYPER = Hyperparams(learning_rate=0.005, epochs=3, batch_size=32)
QA_ND_HYPER = Hyperparams(learning_rate=0.001, epochs=8, batch_size=32)


@dataclass(frozen=True)
class Priors:
    p_bin_prior: float
    p_nd_prior: float

    def __post_init__(self):
        for p in (self.p_bin_prior, self.p_nd_prior):
            if not 0.0 <= p <= 1.0:
                raise ValueError("priors must lie in [0, 1]")
        if abs(self.p_bin_prior + self.p_nd_prior - 1.0) > 1e-12:
            raise ValueError("priors must sum to 1")


def estimate_priors(n_bin_train: int, n_nd_train: int) -> Priors:
    """Priors proportional to the two training-set sizes."""
    if n_bin_train < 0 or n_nd_train < 0:
        raise ValueError("training-set sizes must be non-negative")
    total = n_bin_train + n_nd_train
    if total == 0:
        raise ValueError("both training-set sizes are zero")
    p_bin = n_bin_train / total
    return Priors(p_bin, 1.0 - p_bin)


def combine(p_bin: float, p_nd: float, priors: Priors) -> float:
    for p in (p_bin, p_nd):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"probability {p} outside [0, 1]")
    # min/max clamp guards the last-ulp overshoot of the convex combination
    value = priors.p_bin_prior * p_bin + priors.p_nd_prior * p_nd
    return min(max(value, min(p_bin, p_nd)), max(p_bin, p_nd))


def _pixels(frames) -> np.ndarray:
    """Stack Frames, (Frame, label) pairs, or raw arrays into NHWC."""
    if isinstance(frames, np.ndarray):
        x = frames
    else:
        items = [f[0] if isinstance(f, tuple) else f for f in frames]
        x = np.stack([f.pixels if isinstance(f, Frame) else np.asarray(f) for f in items])
    return x[..., None] if x.ndim == 3 else x


def _batched(fn, x: np.ndarray, size: int = 256) -> np.ndarray:
    if len(x) == 0:
        return np.zeros((0,))
    return np.concatenate([fn(x[i:i + size]) for i in range(0, len(x), size)])


# -- supervised classifier -------------------------------------------------------


def train_qa_bin(samples: Sequence[tuple[Frame, FrameLabel]], hyper: Hyperparams = QA_BIN_HYPER,
                 spec=None) -> ModelParams:
    if not samples:
        raise ValueError("empty training set")
    y = np.array([lab.quality == "sufficient" for _, lab in samples], dtype=int)
    if y.min() == y.max():
        raise ValueError("single-class input")
    x = _pixels(samples)
    spec = spec or vgg_spec(input_shape=x.shape[1:], n_classes=2)
    params = build_network(spec, hyper.seed)
    params, history = train_supervised(params, x, y, hyper)
    log.info("QA classifier trained on %d frames, final loss %.4g", len(y), history[-1])
    return params.with_weights(params.weights, n_train=len(y), history=history)


def score_bin(params: ModelParams, frames) -> np.ndarray:
    """Sufficient-class probability per frame."""
    return _batched(lambda b: forward(params, b)[:, SUFFICIENT].astype(np.float64), _pixels(frames))


# -- one-class novelty model ---------------------------------------------------


@dataclass(frozen=True)
class NoveltyConfig:
    noise_sigma: float = 0.1
    recon_weight: float = 0.4
    discriminator_lr_scale: float = 0.3
    code_units: int = 64
    holdin_size: int = 256
    calibration_quantile: float = 0.05


@dataclass(frozen=True)
class NoveltyModel:
    reconstructor: ModelParams
    discriminator: ModelParams
    noise_sigma: float
    score_calibration: tuple[float, float]
    n_train: int = 0
    history: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if self.reconstructor.spec.input_shape != self.reconstructor.spec.output_shape:
            raise ValueError("reconstructor must map images to images of the same shape")
        if self.discriminator.spec.input_shape != self.reconstructor.spec.input_shape:
            raise ValueError("discriminator and reconstructor disagree on the input shape")

    @property
    def input_shape(self):
        return self.reconstructor.spec.input_shape

    def reconstruct(self, frames) -> np.ndarray:
        x = _pixels(frames)
        return np.concatenate([forward(self.reconstructor, x[i:i + 256]) for i in range(0, len(x), 256)])

    def raw_score(self, frames) -> np.ndarray:
        """Uncalibrated discriminator output on noise-free reconstructions."""
        x = _pixels(frames)
        return _batched(lambda b: forward(self.discriminator, forward(self.reconstructor, b))[:, 0]
                        .astype(np.float64), x)

    def reconstruction_error(self, frames) -> np.ndarray:
        """Per-frame sum of squared reconstruction error (diagnostic only)."""
        x = _pixels(frames)
        r = self.reconstruct(x)
        return ((r.astype(np.float64) - x) ** 2).reshape(len(x), -1).sum(axis=1)

    def calibrate(self, raw) -> np.ndarray:
        scale, offset = self.score_calibration
        return np.clip(scale * np.asarray(raw, dtype=np.float64) + offset, 0.0, 1.0)

    def score(self, frames) -> np.ndarray:
        return self.calibrate(self.raw_score(frames))


def fit_calibration(raw: np.ndarray, quantile: float = 0.05) -> tuple[float, float]:
    """Affine map sending the training ``quantile`` to 0.5 and the maximum to 1.

    All but the lowest ``quantile`` of target-class training frames clear the
    default threshold; frames the discriminator rates below them fall under it.
    """
    if not 0.0 <= quantile < 1.0:
        raise ValueError("quantile must lie in [0, 1)")
    lo, hi = float(np.quantile(raw, quantile)), float(np.max(raw))
    if hi - lo < 1e-12:
        return 0.0, 1.0
    scale = 0.5 / (hi - lo)
    return scale, 0.5 - scale * lo


def train_qa_nd(samples, hyper: Hyperparams = QA_ND_HYPER, config: NoveltyConfig = NoveltyConfig(),
                ) -> NoveltyModel:
    """Adversarial one-class training on sufficient-quality frames.

    Each step corrupts the batch with Gaussian noise, reconstructs it, updates
    the discriminator on real-versus-reconstructed, then updates the
    reconstructor on ``adversarial + recon_weight * ||x - R(x~)||^2``.  The
    returned pair is the epoch with the lowest noise-free reconstruction
    error on a fixed held-in subset.
    """
    if len(samples) == 0:
        raise ValueError("empty training set")
    labels = [s[1] for s in samples if isinstance(s, tuple)]
    if any(lab.quality != "sufficient" for lab in labels):
        raise ValueError("novelty model accepts sufficient-quality frames only")
    dtype = np.dtype(hyper.dtype)
    x_all = _pixels(samples).astype(dtype)
    n = len(x_all)
    shape = x_all.shape[1:]
    seeds = np.random.SeedSequence(hyper.seed).generate_state(3)
    R = build_network(reconstructor_spec(shape, config.code_units), int(seeds[0]), dtype)
    D = build_network(discriminator_spec(shape), int(seeds[1]), dtype)
    opt_r = Optimizer(R, hyper)
    opt_d = Optimizer(D, Hyperparams(learning_rate=hyper.learning_rate * config.discriminator_lr_scale,
                                     optimizer=hyper.optimizer, momentum=hyper.momentum))
    rng = np.random.default_rng(seeds[2])
    holdin = x_all[rng.permutation(n)[: min(config.holdin_size, n)]]

    best = None
    history = []
    for epoch in range(hyper.epochs):
        sums = np.zeros(3)
        order = rng.permutation(n)
        for start in range(0, n, hyper.batch_size):
            x = x_all[order[start:start + hyper.batch_size]]
            b = len(x)
            noisy = x + rng.normal(0.0, config.noise_sigma, x.shape).astype(dtype)
            r_cur = R.with_weights(opt_r.weights)
            z_r, tape_r = run(r_cur, noisy, check=False)
            recon = sigmoid(z_r)

            d_cur = D.with_weights(opt_d.weights)
            z_d, tape_d = run(d_cur, np.concatenate([x, recon]), check=False)
            target = np.concatenate([np.ones(b), np.zeros(b)]).astype(dtype)[:, None]
            d_loss, g = loss_and_grad(d_cur.spec, z_d, target, loss="binary-cross-entropy")
            grads, _ = backward(d_cur, tape_d, g)
            opt_d.step(grads)

            d_cur = D.with_weights(opt_d.weights)
            z_d, tape_d = run(d_cur, recon, check=False)
            adv_loss, g = loss_and_grad(d_cur.spec, z_d, np.ones((b, 1), dtype), loss="binary-cross-entropy")
            _, g_recon_adv = backward(d_cur, tape_d, g)
            diff = recon - x
            rec_loss = float((diff.astype(np.float64) ** 2).reshape(b, -1).sum(axis=1).mean())
            g_out = g_recon_adv + config.recon_weight * 2.0 * diff / b
            grads, _ = backward(r_cur, tape_r, g_out * recon * (1 - recon))
            opt_r.step(grads)
            sums += (d_loss * b, adv_loss * b, rec_loss * b)
        d_mean, adv_mean, rec_mean = sums / n
        if not all(math.isfinite(v) for v in (d_mean, adv_mean, rec_mean)):
            raise NumericError(f"adversarial training diverged at epoch {epoch}")
        r_ep = R.with_weights(opt_r.weights)
        holdin_err = float(((forward(r_ep, holdin) - holdin) ** 2).reshape(len(holdin), -1).sum(axis=1).mean())
        history.append({"epoch": epoch, "d_loss": d_mean, "adv_loss": adv_mean, "recon_loss": rec_mean,
                        "holdin_recon": holdin_err})
        log.info("novelty epoch %d: D %.4f adv %.4f recon %.3f held-in %.3f",
                 epoch, d_mean, adv_mean, rec_mean, holdin_err)
        if best is None or holdin_err < best[0]:
            best = (holdin_err, epoch, [[a.copy() for a in w] for w in opt_r.weights],
                    [[a.copy() for a in w] for w in opt_d.weights])

    _, best_epoch, r_w, d_w = best
    meta = {"seed": int(hyper.seed), "epochs": int(hyper.epochs), "best_epoch": int(best_epoch)}
    R = R.with_weights(r_w, **meta, final_loss=history[best_epoch]["recon_loss"])
    D = D.with_weights(d_w, **meta, final_loss=history[best_epoch]["d_loss"])
    model = NoveltyModel(R, D, config.noise_sigma, (0.0, 1.0), n, tuple(history))
    calibration = fit_calibration(model.raw_score(x_all), config.calibration_quantile)
    return NoveltyModel(R, D, config.noise_sigma, calibration, n, tuple(history))


def score_nd(model: NoveltyModel, frame) -> float:
    """Calibrated sufficient-quality probability of one frame."""
    px = frame.pixels if isinstance(frame, Frame) else np.asarray(frame)
    if px.shape != model.input_shape[:2]:
        raise ValueError(f"frame shape {px.shape} does not match model input {model.input_shape[:2]}")
    return float(model.score(px[None])[0])


# -- verdicts ------------------------------------------------------------------


@dataclass(frozen=True)
class QualityVerdict:
    frame_id: str
    p_bin: float
    p_nd: float
    p_qa: float
    threshold: float
    accepted: bool

    def line(self) -> str:
        return (f"{self.frame_id} {self.p_bin:.6f} {self.p_nd:.6f} {self.p_qa:.6f} "
                f"{self.threshold:.6f} {int(self.accepted)}")


@dataclass(frozen=True)
class QAModels:
    qa_bin: Optional[ModelParams]
    nd: Optional[NoveltyModel]
    priors: Optional[Priors] = None

    @classmethod
    def from_models(cls, qa_bin: Optional[ModelParams], nd: Optional[NoveltyModel]) -> "QAModels":
        priors = None
        if qa_bin is not None and nd is not None:
            priors = estimate_priors(int(qa_bin.train_meta.get("n_train", 0)), nd.n_train)
        return cls(qa_bin, nd, priors)

    def check(self, variant: str) -> None:
        if variant not in VARIANTS:
            raise ValueError(f"unknown QA variant {variant!r}; expected one of {VARIANTS}")
        if variant in ("bin", "bin+nd") and self.qa_bin is None:
            raise ValueError(f"variant {variant!r} needs a trained QA classifier")
        if variant in ("nd", "bin+nd") and self.nd is None:
            raise ValueError(f"variant {variant!r} needs a trained novelty model")
        if variant == "bin+nd" and self.priors is None:
            raise ValueError("variant 'bin+nd' needs priors")

    def assess(self, frames: Sequence[Frame], variant: str = "bin+nd", threshold: float = 0.5,
               priors: Optional[Priors] = None) -> list[QualityVerdict]:
        """Verdicts for a batch of frames; absent models report ``nan`` scores."""
        self.check(variant)
        _check_threshold(threshold)
        priors = priors or self.priors
        frames = [f[0] if isinstance(f, tuple) else f for f in frames]
        if not frames:
            return []
        n = len(frames)
        p_bin = score_bin(self.qa_bin, frames) if self.qa_bin is not None else np.full(n, np.nan)
        p_nd = self.nd.score(frames) if self.nd is not None else np.full(n, np.nan)
        out = []
        for f, pb, pn in zip(frames, p_bin, p_nd):
            if variant == "bin":
                pq = float(pb)
            elif variant == "nd":
                pq = float(pn)
            else:
                pq = combine(float(pb), float(pn), priors)
            out.append(QualityVerdict(f.frame_id, float(pb), float(pn), pq, threshold, pq >= threshold))
        return out

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        if self.qa_bin is not None:
            save_model(self.qa_bin, d / "qa_bin.lgm")
        if self.nd is not None:
            save_novelty(self.nd, d)
        return d

    @classmethod
    def load(cls, directory) -> "QAModels":
        d = Path(directory)
        qa_bin = load_model(d / "qa_bin.lgm") if (d / "qa_bin.lgm").is_file() else None
        nd = load_novelty(d) if (d / "nd_reconstructor.lgm").is_file() else None
        if qa_bin is None and nd is None:
            raise FileNotFoundError(f"no QA models found in {d}")
        return cls.from_models(qa_bin, nd)


def _check_threshold(threshold: float) -> None:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold {threshold} outside [0, 1]")


def assess(frame: Frame, qa_bin: Optional[ModelParams], nd: Optional[NoveltyModel], priors: Optional[Priors],
           threshold: float = 0.5, variant: str = "bin+nd") -> QualityVerdict:
    return QAModels(qa_bin, nd, priors).assess([frame], variant, threshold)[0]


def save_novelty(model: NoveltyModel, directory) -> None:
    d = Path(directory)
    save_model(model.reconstructor, d / "nd_reconstructor.lgm")
    save_model(model.discriminator, d / "nd_discriminator.lgm")
    meta = {
        "noise_sigma": model.noise_sigma,
        "score_calibration": list(model.score_calibration),
        "n_train": model.n_train,
        "history": list(model.history),
    }
    (d / "nd_meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")


def load_novelty(directory) -> NoveltyModel:
    d = Path(directory)
    meta = json.loads((d / "nd_meta.json").read_text())
    return NoveltyModel(
        load_model(d / "nd_reconstructor.lgm"),
        load_model(d / "nd_discriminator.lgm"),
        float(meta["noise_sigma"]),
        tuple(meta["score_calibration"]),
        int(meta["n_train"]),
        tuple(meta.get("history", ())),
    )
