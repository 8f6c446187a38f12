"""Frames, manifests and patient-level cross-validation splits.

Manifest format (UTF-8, tab separated)::

    lusgate-manifest v1
    frame_id<TAB>path<TAB>patient_id<TAB>site<TAB>quality<TAB>diagnosis

``path`` is relative to the manifest's directory unless absolute.
"""
from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .pnm import read_pgm

MANIFEST_HEADER = "lusgate-manifest v1"
QUALITIES = ("sufficient", "insufficient")
DIAGNOSES = ("positive", "control", "unknown")
SITES = ("A", "B")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Frame:
    pixels: np.ndarray
    frame_id: str
    patient_id: str
    site: str = "A"
    timestamp_index: int = 0

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise ValueError("frame pixels must be a 2-D array")
        if px.size and (px.min() < 0 or px.max() > 1):
            raise ValueError(f"frame {self.frame_id}: pixels outside [0, 1]")
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)


@dataclass(frozen=True)
class FrameLabel:
    quality: str
    diagnosis: str = "unknown"

    def __post_init__(self):
        if self.quality not in QUALITIES:
            raise ValueError(f"unknown quality label {self.quality!r}")
        if self.diagnosis not in DIAGNOSES:
            raise ValueError(f"unknown diagnosis label {self.diagnosis!r}")

    @property
    def sufficient(self) -> bool:
        return self.quality == "sufficient"

    @property
    def positive(self) -> bool:
        return self.diagnosis == "positive"


@dataclass(frozen=True)
class Record:
    frame_id: str
    path: str
    patient_id: str
    site: str
    quality: str
    diagnosis: str
    timestamp_index: int = 0

    @property
    def label(self) -> FrameLabel:
        return FrameLabel(self.quality, self.diagnosis)

    def line(self) -> str:
        return "\t".join((self.frame_id, self.path, self.patient_id, self.site, self.quality, self.diagnosis))


@dataclass(frozen=True)
class Manifest:
    records: tuple[Record, ...]
    root: Path = Path(".")

    @property
    def patients(self) -> list[str]:
        return sorted({r.patient_id for r in self.records})

    def patient_diagnoses(self) -> list[tuple[str, str]]:
        """One ``(patient_id, diagnosis)`` per patient; the majority label wins."""
        votes: dict[str, Counter] = defaultdict(Counter)
        for r in self.records:
            votes[r.patient_id][r.diagnosis] += 1
        return [(p, votes[p].most_common(1)[0][0]) for p in sorted(votes)]

    def site_summaries(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {}
        for r in self.records:
            s = out.setdefault(r.site, {"frames": 0, "insufficient": 0, "positive": 0, "control": 0})
            s["frames"] += 1
            s["insufficient"] += r.quality == "insufficient"
            if r.diagnosis in ("positive", "control"):
                s[r.diagnosis] += 1
        for site, s in out.items():
            s["patients"] = len({r.patient_id for r in self.records if r.site == site})
        return out

    def resolve(self, record: Record) -> Path:
        p = Path(record.path)
        return p if p.is_absolute() else self.root / p

    def load(self, record: Record) -> tuple[Frame, FrameLabel]:
        pixels = read_pgm(self.resolve(record))
        frame = Frame(pixels, record.frame_id, record.patient_id, record.site, record.timestamp_index)
        return frame, record.label

    def by_id(self, frame_id: str) -> Record:
        for r in self.records:
            if r.frame_id == frame_id:
                return r
        raise KeyError(f"unknown frame id {frame_id!r}")

    def text(self) -> str:
        return "\n".join([MANIFEST_HEADER] + [r.line() for r in self.records]) + "\n"


def write_manifest(manifest: Manifest, path) -> Path:
    path = Path(path)
    path.write_text(manifest.text(), encoding="utf-8")
    return path


def load_manifest(path, *, check_files: bool = True) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        found = lines[0].strip() if lines else ""
        raise ManifestError(f"unknown manifest schema {found!r}; expected {MANIFEST_HEADER!r}")
    records = []
    seen: set[str] = set()
    patient_site: dict[str, str] = {}
    order: Counter = Counter()
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 6:
            raise ManifestError(f"line {n}: expected 6 tab-separated fields, got {len(fields)}")
        frame_id, rel, patient, site, quality, diagnosis = fields
        if site not in SITES:
            raise ManifestError(f"line {n}: unknown site {site!r}")
        if quality not in QUALITIES:
            raise ManifestError(f"line {n}: unknown quality {quality!r}")
        if diagnosis not in DIAGNOSES:
            raise ManifestError(f"line {n}: unknown diagnosis {diagnosis!r}")
        if frame_id in seen:
            raise ManifestError(f"line {n}: duplicate frame_id {frame_id!r}")
        seen.add(frame_id)
        if patient_site.setdefault(patient, site) != site:
            raise ManifestError(f"line {n}: patient {patient!r} appears at two sites")
        records.append(Record(frame_id, rel, patient, site, quality, diagnosis, order[patient]))
        order[patient] += 1
    if not records:
        raise ManifestError("empty manifest")
    manifest = Manifest(tuple(records), path.parent)
    if check_files:
        for r in records:
            if not manifest.resolve(r).is_file():
                raise ManifestError(f"missing frame file: {manifest.resolve(r)}")
    return manifest


@dataclass(frozen=True)
class FoldSplit:
    k: int
    folds: tuple[frozenset, ...]

    @property
    def patients(self) -> frozenset:
        return frozenset().union(*self.folds)

    def test(self, i: int) -> frozenset:
        return self.folds[i]

    def train(self, i: int) -> frozenset:
        return self.patients - self.folds[i]

    def fold_of(self, patient_id: str) -> int:
        for i, fold in enumerate(self.folds):
            if patient_id in fold:
                return i
        raise KeyError(patient_id)

    def lines(self) -> list[str]:
        return [f"{i}\t{pid}" for i, fold in enumerate(self.folds) for pid in sorted(fold)]


def patient_kfold(patients: Sequence[tuple[str, str]], k: int, seed: int) -> FoldSplit:
    """Stratified patient-level k-fold split.

    Patients of each diagnosis are shuffled and dealt round-robin, continuing
    the deal across diagnoses, so both the fold sizes and the per-diagnosis
    counts differ by at most one between folds.
    """
    ids = [p for p, _ in patients]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate patient ids")
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > len(ids):
        raise ValueError(f"k={k} exceeds the number of patients ({len(ids)})")
    rng = np.random.default_rng(seed)
    by_class: dict[str, list[str]] = defaultdict(list)
    for pid, diag in patients:
        by_class[diag].append(pid)
    slot_order = rng.permutation(k)
    folds: list[set] = [set() for _ in range(k)]
    cursor = 0
    for diag in sorted(by_class):
        members = sorted(by_class[diag])
        for j in rng.permutation(len(members)):
            folds[slot_order[cursor % k]].add(members[j])
            cursor += 1
    return FoldSplit(k, tuple(frozenset(f) for f in folds))


def frames_for(
    manifest: Manifest,
    patients: Iterable[str],
    filter: Optional[Callable[[FrameLabel], bool]] = None,
    *,
    quality: Optional[str] = None,
    diagnosis: Optional[str] = None,
) -> list[tuple[Frame, FrameLabel]]:
    """Load the frames of ``patients`` in manifest order, optionally filtered."""
    wanted = set(patients)
    unknown = wanted - set(manifest.patients)
    if unknown:
        raise KeyError(f"unknown patient id(s): {sorted(unknown)}")
    out = []
    for r in manifest.records:
        if r.patient_id not in wanted:
            continue
        if quality is not None and r.quality != quality:
            continue
        if diagnosis is not None and r.diagnosis != diagnosis:
            continue
        if filter is not None and not filter(r.label):
            continue
        out.append(manifest.load(r))
    return out


def stack(frames: Sequence) -> np.ndarray:
    """``(N, H, W)`` array from Frames or ``(Frame, FrameLabel)`` pairs."""
    px = [(f[0] if isinstance(f, tuple) else f).pixels for f in frames]
    if not px:
        return np.zeros((0, 0, 0))
    return np.stack(px)
