"""Synthetic lung-ultrasound-like frames.

Sufficient frames show a bright, near-horizontal pleural band with fainter
A-line reverberations below it at multiples of the pleural depth.  Frames
from positive patients add 1-3 bright vertical B-line streaks running from
the pleural band to the bottom of the sector.  Insufficient frames apply one
of four degradations:

``occluded``         no probe contact / shadowing: near-black sector
``off-target``       blobby soft-tissue texture, no pleura
``low-gain``         the sufficient image, dimmed into the noise floor
``saturated-noise``  the sufficient image, over-driven and swamped by noise

Everything is a pure function of the recipe seed.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.ndimage import uniform_filter

from .dataset import Frame, FrameLabel, Manifest, Record, write_manifest
from .pnm import to_uint8, write_pgm

log = logging.getLogger(__name__)

MODES = ("occluded", "off-target", "low-gain", "saturated-noise")


@dataclass(frozen=True)
class Anatomy:
    """Ground-truth geometry of a rendered frame (rows/cols in pixels)."""

    pleural_row: float
    tilt: float
    bline_cols: tuple[int, ...] = ()
    bline_width: int = 0


@dataclass(frozen=True)
class FrameRecipe:
    quality: str
    diagnosis: str
    seed: int
    mode: Optional[str] = None
    frame_size: tuple[int, int] = (64, 64)
    noise_level: float = 0.5
    pleural_depth: Optional[float] = None
    frame_id: str = "frame"
    patient_id: str = "patient"
    site: str = "A"
    timestamp_index: int = 0

    def __post_init__(self):
        if self.quality not in ("sufficient", "insufficient"):
            raise ValueError(f"unknown quality {self.quality!r}")
        if self.diagnosis not in ("positive", "control"):
            raise ValueError(f"unknown diagnosis {self.diagnosis!r}")
        if (self.mode is not None) != (self.quality == "insufficient"):
            raise ValueError("mode must be given exactly when quality is insufficient")
        if self.mode is not None and self.mode not in MODES:
            raise ValueError(f"unknown degradation mode {self.mode!r}")
        if min(self.frame_size) < 16:
            raise ValueError("frame_size must be at least 16x16")


@dataclass(frozen=True)
class PhantomConfig:
    frame_size: tuple[int, int] = (64, 64)
    n_patients_positive: int = 10
    n_patients_control: int = 12
    frames_per_patient: int = 100
    insufficient_fraction: float = 0.15
    noise_level: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_patients_positive < 0 or self.n_patients_control < 0:
            raise ValueError("patient counts must be non-negative")
        if self.n_patients_positive + self.n_patients_control < 1:
            raise ValueError("at least one patient is required")
        if self.frames_per_patient < 1:
            raise ValueError("zero frames requested")
        if not 0.0 <= self.insufficient_fraction <= 1.0:
            raise ValueError("insufficient_fraction must lie in [0, 1]")
        if self.noise_level < 0:
            raise ValueError("noise_level must be non-negative")


def sector_mask(h: int, w: int) -> np.ndarray:
    """Boolean curvilinear-probe footprint: an annular sector opening downward."""
    rows, cols = np.mgrid[0:h, 0:w].astype(float)
    apex_r, apex_c = -0.45 * h, (w - 1) / 2
    dr, dc = rows - apex_r, cols - apex_c
    radius = np.hypot(dr, dc)
    angle = np.degrees(np.arctan2(dc, dr))
    return (np.abs(angle) <= 33.0) & (radius >= 0.45 * h) & (radius <= 1.55 * h)


def _speckle(rng, shape, level):
    if level == 0:
        return np.ones(shape)
    noise = rng.uniform(1.0 - level, 1.0 + level, size=shape)
    return uniform_filter(noise, size=3, mode="reflect")


def _band(rows, centre, half_width):
    """Soft-edged horizontal band profile in [0, 1]."""
    return np.clip(1.0 - np.abs(rows - centre) / half_width, 0.0, 1.0) ** 0.7


def _lung(rng, h, w, recipe: FrameRecipe) -> tuple[np.ndarray, Anatomy]:
    rows, cols = np.mgrid[0:h, 0:w].astype(float)
    depth = recipe.pleural_depth if recipe.pleural_depth is not None else rng.uniform(0.22, 0.3)
    depth = float(np.clip(depth + rng.normal(0, 0.01), 0.18, 0.34))
    p_row = depth * h
    tilt = rng.uniform(-0.025, 0.025)
    line = p_row + tilt * (cols - w / 2)

    img = np.where(rows < line, rng.uniform(0.17, 0.22), rng.uniform(0.07, 0.1))
    thick = max(1.5, 0.03 * h)
    img = np.maximum(img, rng.uniform(0.9, 1.0) * _band(rows, line, thick))
    for k, amp in ((2, rng.uniform(0.32, 0.38)), (3, rng.uniform(0.2, 0.25))):
        img = np.maximum(img, amp * _band(rows, k * line, thick * 0.8))

    blines: tuple[int, ...] = ()
    width = 0
    if recipe.diagnosis == "positive":
        n = int(rng.integers(1, 4))
        width = max(2, round(0.03 * w))
        lo, hi = int(0.3 * w), int(0.7 * w) - width
        choices = np.arange(lo, hi + 1)
        cols_chosen: list[int] = []
        for c in rng.permutation(choices):
            if all(abs(int(c) - o) > width + 2 for o in cols_chosen):
                cols_chosen.append(int(c))
            if len(cols_chosen) == n:
                break
        blines = tuple(sorted(cols_chosen))
        for c in blines:
            amp = rng.uniform(0.55, 0.7)
            centre = c + (width - 1) / 2
            across = np.clip(1.0 - np.abs(cols - centre) / (width / 2 + 0.5), 0.0, 1.0)
            fade = 1.0 - 0.3 * np.clip((rows - line) / (h - line), 0.0, 1.0)
            streak = amp * across * fade * (rows >= line)
            img = np.maximum(img, streak)
    return img, Anatomy(p_row, tilt, blines, width)


def render(recipe: FrameRecipe) -> tuple[np.ndarray, Anatomy]:
    """Pixels in [0, 1] plus ground-truth anatomy."""
    h, w = recipe.frame_size
    rng = np.random.default_rng(recipe.seed)
    img, anatomy = _lung(rng, h, w, recipe)
    mode = recipe.mode
    if mode == "occluded":
        img = np.full((h, w), rng.uniform(0.03, 0.07))
        anatomy = Anatomy(float("nan"), 0.0)
    elif mode == "off-target":
        rows, cols = np.mgrid[0:h, 0:w].astype(float)
        img = np.full((h, w), rng.uniform(0.2, 0.28))
        for _ in range(int(rng.integers(3, 7))):
            r0, c0 = rng.uniform(0.1 * h, 0.95 * h), rng.uniform(0.2 * w, 0.8 * w)
            sr, sc = rng.uniform(0.05, 0.12) * h, rng.uniform(0.05, 0.12) * w
            amp = rng.uniform(0.15, 0.3) * rng.choice([-1, 1])
            img += amp * np.exp(-0.5 * (((rows - r0) / sr) ** 2 + ((cols - c0) / sc) ** 2))
        anatomy = Anatomy(float("nan"), 0.0)
    img = img * _speckle(rng, (h, w), recipe.noise_level)
    if mode == "low-gain":
        img = img * rng.uniform(0.06, 0.1) + rng.uniform(0.0, 0.05, size=(h, w))
    elif mode == "saturated-noise":
        img = img * rng.uniform(1.6, 2.0) + rng.normal(0.35, 0.3, size=(h, w))
    img = np.clip(img, 0.0, 1.0) * sector_mask(h, w)
    return img, anatomy


def generate_frame(recipe: FrameRecipe) -> tuple[Frame, FrameLabel]:
    pixels, _ = render(recipe)
    frame = Frame(pixels, recipe.frame_id, recipe.patient_id, recipe.site, recipe.timestamp_index)
    return frame, FrameLabel(recipe.quality, recipe.diagnosis)


# -- oracles ---------------------------------------------------------------


def pleural_band_detected(pixels, window: int = 2, z: float = 3.0) -> bool:
    """Row-statistics detector: some ``window``-row band of the sector has a mean
    at least ``z`` standard deviations above the sector's global mean."""
    px = np.asarray(pixels, dtype=float)
    mask = sector_mask(*px.shape)
    vals = px[mask]
    thresh = vals.mean() + z * vals.std()
    counts = mask.sum(axis=1)
    sums = (px * mask).sum(axis=1)
    for r in range(px.shape[0] - window + 1):
        n = counts[r:r + window].sum()
        if n and sums[r:r + window].sum() / n >= thresh:
            return True
    return False


def bline_detected(pixels, margin: float = 0.12) -> bool:
    """Column-streak detector: below the brightest row band, some 2-column band is
    brighter than the median column by ``margin``."""
    px = np.asarray(pixels, dtype=float)
    h, w = px.shape
    mask = sector_mask(h, w)
    row_means = (px * mask).sum(axis=1) / np.maximum(mask.sum(axis=1), 1)
    pleura = int(np.argmax(row_means[: int(0.45 * h)]))
    below = slice(pleura + 3, h)
    m = mask[below]
    col_n = m.sum(axis=0)
    usable = col_n >= 0.5 * (h - pleura - 3)
    col_means = np.where(usable, (px[below] * m).sum(axis=0) / np.maximum(col_n, 1), np.nan)
    pair = np.convolve(np.nan_to_num(col_means, nan=-1.0), [0.5, 0.5], mode="valid")
    ok = usable[:-1] & usable[1:]
    if not ok.any():
        return False
    return bool(pair[ok].max() - np.nanmedian(col_means) > margin)


# -- datasets ----------------------------------------------------------------


def frame_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1, np.uint64)[0])


def dataset_recipes(config: PhantomConfig, site: str = "A") -> list[FrameRecipe]:
    """All recipes of a dataset, patient-major, in manifest order."""
    rng = np.random.default_rng(frame_seed(config.seed, 0))
    patients = [("positive", f"{site}P{i:03d}") for i in range(config.n_patients_positive)]
    patients += [("control", f"{site}C{i:03d}") for i in range(config.n_patients_control)]
    n_total = len(patients) * config.frames_per_patient
    n_bad = round(config.insufficient_fraction * n_total)
    bad = np.zeros(n_total, dtype=bool)
    bad[rng.permutation(n_total)[:n_bad]] = True
    modes = rng.integers(0, len(MODES), size=n_total)
    depths = rng.uniform(0.22, 0.3, size=len(patients))

    recipes = []
    for pi, (diagnosis, pid) in enumerate(patients):
        for t in range(config.frames_per_patient):
            n = pi * config.frames_per_patient + t
            recipes.append(
                FrameRecipe(
                    quality="insufficient" if bad[n] else "sufficient",
                    diagnosis=diagnosis,
                    seed=frame_seed(config.seed, 1, pi, t),
                    mode=MODES[modes[n]] if bad[n] else None,
                    frame_size=tuple(config.frame_size),
                    noise_level=config.noise_level,
                    pleural_depth=float(depths[pi]),
                    frame_id=f"{site}_{pid}_{t:05d}",
                    patient_id=pid,
                    site=site,
                    timestamp_index=t,
                )
            )
    return recipes


def generate_dataset(config: PhantomConfig, out_dir, site: str = "A") -> Manifest:
    """Render every frame to ``out_dir/frames/*.pgm`` and write ``out_dir/manifest.tsv``."""
    out = Path(out_dir)
    frames_dir = out / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for recipe in dataset_recipes(config, site):
        pixels, _ = render(recipe)
        rel = f"frames/{recipe.frame_id}.pgm"
        write_pgm(out / rel, to_uint8(pixels))
        records.append(
            Record(recipe.frame_id, rel, recipe.patient_id, site, recipe.quality, recipe.diagnosis,
                   recipe.timestamp_index)
        )
    manifest = Manifest(tuple(records), out)
    write_manifest(manifest, out / "manifest.tsv")
    log.info("wrote %d frames for %d patients to %s", len(records), len(manifest.patients), out)
    return manifest
