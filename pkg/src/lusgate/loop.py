"""Closed-loop acquisition: repeat at a location until QA accepts a frame or attempts run out."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .dataset import Frame
from .phantom import MODES, FrameRecipe, PhantomConfig, frame_seed, generate_frame
from .qa import VARIANTS, QAModels, QualityVerdict


class SourceExhausted(RuntimeError):
    """A location could not supply the frame the loop asked for."""


@dataclass(frozen=True)
class AcquisitionPolicy:
    max_attempts: int = 5
    qa_variant: str = "bin+nd"
    threshold: float = 0.5

    def __post_init__(self):
        if int(self.max_attempts) != self.max_attempts or self.max_attempts < 1:
            raise ValueError("max_attempts must be a positive integer")
        if self.qa_variant not in VARIANTS:
            raise ValueError(f"unknown QA variant {self.qa_variant!r}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")


@dataclass(frozen=True)
class Location:
    """One scan location; ``draw(attempt)`` acquires the frame for that attempt."""

    location_id: str
    draw: Callable[[int], Frame]
    limit: Optional[int] = None

    def acquire(self, attempt: int) -> Frame:
        if self.limit is not None and attempt >= self.limit:
            raise SourceExhausted(f"location {self.location_id}: no frame for attempt {attempt}")
        return self.draw(attempt)


@dataclass(frozen=True)
class LoopEntry:
    location_id: str
    attempts: tuple[tuple[int, QualityVerdict], ...]
    accepted_frame: Optional[str]

    @property
    def outcome(self) -> str:
        return "accepted" if self.accepted_frame is not None else "exhausted"


@dataclass(frozen=True)
class LoopLog:
    entries: tuple[LoopEntry, ...]
    policy: AcquisitionPolicy

    @property
    def total_attempts(self) -> int:
        return sum(len(e.attempts) for e in self.entries)

    @property
    def n_accepted(self) -> int:
        return sum(e.accepted_frame is not None for e in self.entries)

    @property
    def exhausted(self) -> list[str]:
        return [e.location_id for e in self.entries if e.accepted_frame is None]

    @property
    def acceptance_rate(self) -> float:
        return self.n_accepted / len(self.entries) if self.entries else float("nan")

    @property
    def mean_attempts_accepted(self) -> float:
        n = [len(e.attempts) for e in self.entries if e.accepted_frame is not None]
        return float(np.mean(n)) if n else float("nan")

    @property
    def first_attempt_rate(self) -> float:
        if not self.entries:
            return float("nan")
        return sum(e.accepted_frame is not None and len(e.attempts) == 1 for e in self.entries) / len(self.entries)

    def frame_ids(self) -> list[str]:
        return [v.frame_id for e in self.entries for _, v in e.attempts]

    def lines(self) -> list[str]:
        out = ["location attempt frame_id p_bin p_nd p_qa threshold accepted"]
        for e in self.entries:
            out += [f"{e.location_id} {t} {v.line()}" for t, v in e.attempts]
            out.append(f"{e.location_id} outcome {e.outcome} {e.accepted_frame or '-'}")
        return out

    def summary(self) -> dict:
        return {
            "locations": len(self.entries),
            "accepted": self.n_accepted,
            "exhausted": len(self.entries) - self.n_accepted,
            "total_attempts": self.total_attempts,
            "acceptance_rate": self.acceptance_rate,
            "first_attempt_rate": self.first_attempt_rate,
            "mean_attempts_accepted": self.mean_attempts_accepted,
            "max_attempts": self.policy.max_attempts,
            "qa_variant": self.policy.qa_variant,
            "threshold": self.policy.threshold,
        }

    def summary_block(self) -> str:
        def fmt(v):
            return f"{v:.4f}" if isinstance(v, float) else str(v)

        return "\n".join(f"{k} {fmt(v)}" for k, v in self.summary().items()) + "\n"


def simulate_acquisition(source: Sequence[Location], qa: QAModels, policy: AcquisitionPolicy = AcquisitionPolicy(),
                         ) -> tuple[list[Frame], LoopLog]:
    """Run the accept/repeat cycle over every location of ``source``.

    Returns the accepted frames (one per accepted location, in location
    order) and the log of every frame drawn. Locations that use up
    ``policy.max_attempts`` are logged as exhausted and forward nothing.
    """
    qa.check(policy.qa_variant)
    accepted: list[Frame] = []
    entries = []
    for loc in source:
        attempts = []
        taken = None
        for t in range(policy.max_attempts):
            frame = loc.acquire(t)
            (verdict,) = qa.assess([frame], policy.qa_variant, policy.threshold)
            attempts.append((t, verdict))
            if verdict.accepted:
                taken = frame
                break
        if taken is not None:
            accepted.append(taken)
        entries.append(LoopEntry(loc.location_id, tuple(attempts), taken.frame_id if taken is not None else None))
    return accepted, LoopLog(tuple(entries), policy)


def schedule_at(schedule: Sequence[float], attempt: int) -> float:
    """Probability of an insufficient frame at ``attempt``; the last value repeats."""
    return float(schedule[min(attempt, len(schedule) - 1)])


def operator_source(config: PhantomConfig, schedule: Sequence[float], seed: int, n_locations: int,
                    ) -> list[Location]:
    """Phantom locations whose attempt ``t`` is insufficient with probability ``schedule[t]``.

    A decreasing schedule stands in for an operator who corrects the probe
    after each rejection. Every draw is a pure function of
    ``(seed, location, attempt)``, so replays see identical streams.
    """
    schedule = tuple(float(p) for p in schedule)
    if not schedule:
        raise ValueError("empty quality schedule")
    if any(not 0.0 <= p <= 1.0 for p in schedule):
        raise ValueError("schedule probabilities must lie in [0, 1]")
    if n_locations < 1:
        raise ValueError("n_locations must be positive")
    rng = np.random.default_rng(frame_seed(seed, 0))
    diagnoses = rng.random(n_locations) < 0.5
    depths = rng.uniform(0.22, 0.3, n_locations)

    def make(i: int) -> Location:
        lid = f"L{i:04d}"

        def draw(t: int) -> Frame:
            bad = draw_quality(seed, schedule, i, t)
            mode = MODES[int(np.random.default_rng(frame_seed(seed, 3, i, t)).integers(len(MODES)))]
            recipe = FrameRecipe(
                quality="insufficient" if bad else "sufficient",
                diagnosis="positive" if diagnoses[i] else "control",
                seed=frame_seed(seed, 2, i, t),
                mode=mode if bad else None,
                frame_size=tuple(config.frame_size),
                noise_level=config.noise_level,
                pleural_depth=float(depths[i]),
                frame_id=f"{lid}_a{t}",
                patient_id=lid,
                timestamp_index=t,
            )
            return generate_frame(recipe)[0]

        return Location(lid, draw)

    return [make(i) for i in range(n_locations)]


def draw_quality(seed: int, schedule: Sequence[float], location: int, attempt: int) -> bool:
    """True when ``operator_source`` would draw an insufficient frame (no rendering)."""
    r = np.random.default_rng(frame_seed(seed, 1, location, attempt))
    return bool(r.random() < schedule_at(schedule, attempt))
