"""Positive-versus-control frame classifier and its patient-level cross-validation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .dataset import FoldSplit, Frame, FrameLabel, Manifest, frames_for, patient_kfold
from .nn import Hyperparams, ModelParams, build_network, forward, train_supervised, vgg_spec
from .seeding import derive_seed

log = logging.getLogger(__name__)

POSITIVE = 1  # class index of "positive" in the diagnosis head
DIAG_HYPER = Hyperparams(learning_rate=0.005, epochs=3, batch_size=32)


@dataclass(frozen=True)
class DiagnosisScore:
    frame_id: str
    p_positive: float
    fold_index: int
    true_label: str = "unknown"

    def line(self) -> str:
        return f"{self.frame_id} {self.fold_index} {self.p_positive:.6f} {self.true_label}"


def _xy(samples):
    samples = [s for s in samples if s[1].diagnosis in ("positive", "control")]
    if not samples:
        raise ValueError("no frames with a positive/control label")
    x = np.stack([f.pixels for f, _ in samples])[..., None]
    y = np.array([lab.diagnosis == "positive" for _, lab in samples], dtype=int)
    return x, y


def train_dbin(samples: Sequence[tuple[Frame, FrameLabel]], hyper: Hyperparams = DIAG_HYPER,
               spec=None) -> ModelParams:
    """Train on every labelled frame regardless of its quality label."""
    x, y = _xy(samples)
    if y.min() == y.max():
        raise ValueError("single-class input")
    spec = spec or vgg_spec(input_shape=x.shape[1:], n_classes=2)
    params = build_network(spec, hyper.seed)
    params, history = train_supervised(params, x, y, hyper)
    log.info("diagnosis classifier trained on %d frames, final loss %.4g", len(y), history[-1])
    return params.with_weights(params.weights, n_train=len(y), history=history)


def p_positive(params: ModelParams, frames) -> np.ndarray:
    frames = [f[0] if isinstance(f, tuple) else f for f in frames]
    if not frames:
        return np.zeros(0)
    x = np.stack([f.pixels for f in frames])
    return np.concatenate([forward(params, x[i:i + 256])[:, POSITIVE] for i in range(0, len(x), 256)]).astype(float)


def score_diag(params: ModelParams, frame: Frame, fold_index: int = -1) -> DiagnosisScore:
    want = params.spec.input_shape[:2]
    if frame.pixels.shape != want:
        raise ValueError(f"frame shape {frame.pixels.shape} does not match model input {want}")
    return DiagnosisScore(frame.frame_id, float(p_positive(params, [frame])[0]), fold_index)


@dataclass(frozen=True)
class FoldResult:
    fold_index: int
    model: ModelParams
    train_patients: frozenset
    test_patients: frozenset
    scores: tuple[DiagnosisScore, ...]


def crossval_run(manifest: Manifest, k: int = 5, seed: int = 0, hyper: Hyperparams = DIAG_HYPER,
                 ) -> tuple[FoldSplit, list[FoldResult]]:
    """Train one classifier per fold and score that fold's held-out patients.

    Every manifest frame is scored exactly once, by the model whose training
    patients exclude the frame's patient.
    """
    diagnoses = {d for _, d in manifest.patient_diagnoses()}
    if not {"positive", "control"} <= diagnoses:
        raise ValueError("cross-validation needs both positive and control patients")
    split = patient_kfold(manifest.patient_diagnoses(), k, derive_seed(seed, "kfold"))
    results = []
    for i in range(k):
        train = frames_for(manifest, split.train(i))
        test = frames_for(manifest, split.test(i))
        fold_hyper = replace(hyper, seed=derive_seed(seed, "diag", i))
        model = train_dbin(train, fold_hyper)
        model = model.with_weights(model.weights, fold=i)
        probs = p_positive(model, test)
        scores = tuple(
            DiagnosisScore(f.frame_id, float(p), i, lab.diagnosis) for (f, lab), p in zip(test, probs)
        )
        log.info("fold %d: %d train / %d test frames", i, len(train), len(test))
        results.append(FoldResult(i, model, split.train(i), split.test(i), scores))
    return split, results
