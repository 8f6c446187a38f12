"""Grad-CAM, guided backpropagation and guided Grad-CAM for the convolutional classifiers.

The class score is the pre-head logit of the target class (for a single-unit
sigmoid head, class 0 scores as the negated logit).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.ndimage import zoom

from .dataset import Frame
from .nn import Activation, Conv, ModelParams, backward, run
from .nn.engine import apply_head
from .phantom import Anatomy
from .pnm import write_pgm, write_ppm


@dataclass(frozen=True)
class SaliencyMap:
    heatmap: np.ndarray
    target_class: int
    target_layer: int

    @property
    def is_zero(self) -> bool:
        return not self.heatmap.any()


def _normalize(m: np.ndarray) -> np.ndarray:
    m = np.maximum(np.asarray(m, dtype=float), 0.0)
    top = m.max() if m.size else 0.0
    return m / top if top > 0 else np.zeros_like(m)


def _pixels(frame) -> np.ndarray:
    return frame.pixels if isinstance(frame, Frame) else np.asarray(frame, dtype=float)


def last_conv(params: ModelParams) -> int:
    idx = [i for i, layer in enumerate(params.spec.layers) if isinstance(layer, Conv)]
    if not idx:
        raise ValueError("network has no convolutional layer")
    return idx[-1]


def _score_grad(params: ModelParams, logits: np.ndarray, target_class: int) -> np.ndarray:
    g = np.zeros_like(logits)
    units = logits.shape[-1]
    if units == 1:
        if target_class not in (0, 1):
            raise ValueError("target_class must be 0 or 1 for a single-unit head")
        g[..., 0] = 1.0 if target_class == 1 else -1.0
    else:
        if not 0 <= target_class < units:
            raise ValueError(f"target_class {target_class} out of range for {units} classes")
        g[..., target_class] = 1.0
    return g


def _feature_layer(params: ModelParams, target_layer: int) -> int:
    """Index whose output holds the feature maps: the conv, or the relu right after it."""
    layers = params.spec.layers
    nxt = target_layer + 1
    if nxt < len(layers) and isinstance(layers[nxt], Activation) and layers[nxt].kind == "relu":
        return nxt
    return target_layer


def grad_cam(params: ModelParams, frame, target_class: int, target_layer: Optional[int] = None) -> SaliencyMap:
    """Rectified, gradient-weighted sum of the target layer's feature maps.

    Channel weights are the spatial means of d(class score)/d(feature map);
    the map is bilinearly upsampled to the frame size and max-normalized.
    """
    layer = last_conv(params) if target_layer is None else target_layer
    if not (0 <= layer < len(params.spec.layers)) or not isinstance(params.spec.layers[layer], Conv):
        raise ValueError(f"target layer {target_layer} is not a convolutional layer")
    px = _pixels(frame)
    logits, tape = run(params, px[None, ..., None])
    _, _, outs = backward(params, tape, _score_grad(params, logits, target_class), collect=True)
    k = _feature_layer(params, layer)
    feats = tape.inputs[k + 1][0] if k + 1 < len(tape.inputs) else logits[0]
    grads = outs[k][0]
    weights = grads.mean(axis=(0, 1))
    cam = np.maximum((feats * weights).sum(axis=-1), 0.0)
    if cam.shape != px.shape:
        cam = zoom(cam, (px.shape[0] / cam.shape[0], px.shape[1] / cam.shape[1]), order=1)
    return SaliencyMap(_normalize(cam), int(target_class), layer)


def guided_backprop(params: ModelParams, frame, target_class: int) -> np.ndarray:
    """Signed input gradient of the class score under the guided-relu rule."""
    px = _pixels(frame)
    logits, tape = run(params, px[None, ..., None], guided=True)
    _, dx = backward(params, tape, _score_grad(params, logits, target_class))
    return dx[0, ..., 0].astype(float)


def combine_maps(guided: np.ndarray, cam: np.ndarray) -> np.ndarray:
    return _normalize(np.abs(guided) * cam)


def guided_grad_cam(params: ModelParams, frame, target_class: int, target_layer: Optional[int] = None,
                    ) -> SaliencyMap:
    cam = grad_cam(params, frame, target_class, target_layer)
    guided = guided_backprop(params, frame, target_class)
    return SaliencyMap(combine_maps(guided, cam.heatmap), cam.target_class, cam.target_layer)


# -- export --------------------------------------------------------------------


def red_to_blue(heat: np.ndarray) -> np.ndarray:
    """Jet-style colors: 1 is red, 0 is blue."""
    from matplotlib import colormaps

    return colormaps["jet"](np.clip(heat, 0.0, 1.0))[..., :3]


def overlay(pixels: np.ndarray, heat: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    gray = np.repeat(np.asarray(pixels, dtype=float)[..., None], 3, axis=-1)
    return np.clip((1 - alpha) * gray + alpha * red_to_blue(heat), 0.0, 1.0)


def export_map(smap: SaliencyMap, frame, out_dir, stem: str) -> tuple[Path, Path]:
    """Write ``stem.pgm`` (raw map) and ``stem_overlay.ppm``; return both paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    raw = write_pgm(out / f"{stem}.pgm", smap.heatmap)
    over = write_ppm(out / f"{stem}_overlay.ppm", overlay(_pixels(frame), smap.heatmap))
    return raw, over


# -- occlusion oracle ----------------------------------------------------------


def streak_mask(shape, anatomy: Anatomy, cols=None) -> np.ndarray:
    """Pixels of the B-line column bands below the pleural line."""
    h, w = shape
    cols = anatomy.bline_cols if cols is None else cols
    rows, cc = np.mgrid[0:h, 0:w]
    line = anatomy.pleural_row + anatomy.tilt * (cc - w / 2) + 2
    mask = np.zeros(shape, dtype=bool)
    for c in cols:
        mask |= (cc >= c - 1) & (cc < c + anatomy.bline_width + 1)
    return mask & (rows >= line)


def occlude(pixels: np.ndarray, mask: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace ``mask`` pixels by the row median of the ``keep`` pixels."""
    out = np.array(pixels, dtype=float)
    for r in np.flatnonzero(mask.any(axis=1)):
        ref = out[r, keep[r]]
        out[r, mask[r]] = np.median(ref) if ref.size else 0.0
    return out


@dataclass(frozen=True)
class OcclusionResult:
    drop_streak: float
    drop_control: float
    heat_inside: float
    heat_outside: float

    @property
    def occlusion_confirms(self) -> bool:
        return self.drop_streak > self.drop_control

    @property
    def heatmap_confirms(self) -> bool:
        return self.heat_inside > self.heat_outside


def occlusion_check(params: ModelParams, pixels: np.ndarray, anatomy: Anatomy, smap: SaliencyMap,
                    target_class: int = 1, seed: int = 0, n_controls: int = 3) -> OcclusionResult:
    """Compare masking the streaks against masking equal-area bands elsewhere.

    The drop is the fall in the target-class probability. Controls are
    column bands of the same width, inside the lung, clear of every streak.
    """
    if not anatomy.bline_cols:
        raise ValueError("frame has no B-lines")
    h, w = pixels.shape
    rng = np.random.default_rng(seed)
    streak = streak_mask(pixels.shape, anatomy)
    below = streak_mask(pixels.shape, anatomy, cols=range(0, w)) & (pixels > 0)
    keep = below & ~streak

    def prob(x):
        return float(apply_head(params.spec.head, run(params, x[None, ..., None])[0])[0, target_class])

    base = prob(pixels)
    drop_streak = base - prob(occlude(pixels, streak, keep))
    width = anatomy.bline_width
    lo, hi = int(0.2 * w), int(0.8 * w) - width
    allowed = [c for c in range(lo, hi + 1)
               if all(abs(c - b) > width + 2 for b in anatomy.bline_cols)]
    drops = []
    for _ in range(n_controls):
        cols = sorted(rng.choice(allowed, size=min(len(anatomy.bline_cols), len(allowed)), replace=False))
        ctrl = streak_mask(pixels.shape, anatomy, cols=cols) & ~streak
        drops.append(base - prob(occlude(pixels, ctrl, keep & ~ctrl)))
    inside = smap.heatmap[streak].mean()
    outside = smap.heatmap[below & ~streak].mean()
    return OcclusionResult(drop_streak, float(np.mean(drops)), float(inside), float(outside))
