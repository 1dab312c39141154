"""Playback simulation and quality-of-experience metrics.

Times are microseconds, like the rest of the simulator. The quality model is a
surrogate for pixel SSIM: it only knows which frames arrived damaged and how far
the damage propagates inside a chunk.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import IncompleteStatuses
from .session import CORRUPTED, INTACT, MISSING, RECOVERED, FrameStatus

US_PER_S = 1_000_000.0
UNRENDERED = "unrendered"


@dataclass(frozen=True)
class QualityModel:
    s_self: float = 0.30
    s_prop: float = 0.85
    s_floor: float = 0.20

    def __post_init__(self):
        for name in ("s_self", "s_prop", "s_floor"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


@dataclass(frozen=True)
class PlaybackConfig:
    fps: float = 24.0
    frames_per_chunk: int = 96
    quality_model: QualityModel = field(default_factory=QualityModel)

    def __post_init__(self):
        if not self.fps > 0:
            raise ValueError("fps must be positive")
        if self.frames_per_chunk < 1:
            raise ValueError("frames_per_chunk must be >= 1")

    @property
    def frame_period(self) -> float:
        return US_PER_S / self.fps


@dataclass
class PlaybackEvents:
    start_time: float
    stalls: list[tuple[float, float]]
    render_times: list[float]  # one per rendered frame, in frame order
    displayed: list[str]  # outcome as shown on screen, UNRENDERED past a truncation
    truncated: bool = False

    @property
    def total_stall(self) -> float:
        return sum(e - b for b, e in self.stalls)

    @property
    def startup_delay(self) -> float:
        return self.start_time


def simulate_playback(statuses: list[FrameStatus], cfg: PlaybackConfig = PlaybackConfig(),
                      deadline: float = math.inf) -> PlaybackEvents:
    """Play frames at the nominal rate from the moment the first chunk is resolved.

    A blocking frame (``reliable``) that is not final when due stalls playback
    until it is. A non-blocking frame that is late is shown as missing instead.
    Stalls are cut at ``deadline``; frames after such a cut are never rendered.
    """
    n = len(statuses)
    if n == 0:
        return PlaybackEvents(0.0, [], [], [])
    for i, st in enumerate(statuses):
        if st is None or st.index != i:
            raise IncompleteStatuses(f"no final status for frame {i}")
    f_t = cfg.frame_period
    first = statuses[:cfg.frames_per_chunk]
    start = max(st.complete_time for st in first)
    stalls: list[tuple[float, float]] = []
    render: list[float] = []
    shown: list[str] = []
    truncated = False
    if start >= deadline:
        return PlaybackEvents(deadline, [], [], [UNRENDERED] * n, True)
    shift = 0.0
    for i, st in enumerate(statuses):
        due = start + i * f_t + shift
        t = st.complete_time
        if t <= due:
            render.append(due)
            shown.append(st.outcome)
            continue
        if not st.reliable:
            render.append(due)
            shown.append(MISSING)
            continue
        end = min(t, deadline)
        # the frame after a stall is due one period after it ends, so waits never overlap
        stalls.append((due, end))
        shift += end - due
        if t > deadline:
            truncated = True
            shown.extend([UNRENDERED] * (n - i))
            break
        render.append(end)
        shown.append(st.outcome)
    return PlaybackEvents(start, stalls, render, shown, truncated)


def buf_ratio(events: PlaybackEvents, video_duration: float) -> float:
    """Stall time over video duration; both in the same unit (seconds or microseconds)."""
    if video_duration <= 0:
        raise ValueError("video_duration must be positive")
    return events.total_stall / video_duration


def rate_buf(events: PlaybackEvents, total_frames: int) -> float:
    if total_frames <= 0:
        raise ValueError("total_frames must be positive")
    return len(events.stalls) / total_frames


def frame_ssim(outcomes, model: QualityModel = QualityModel(), frames_per_chunk: int = 96) -> list[float]:
    """Per-frame quality; accepts FrameStatus objects or bare outcome strings."""
    out = []
    unresolved = 0
    for i, o in enumerate(outcomes):
        if not isinstance(o, str):
            o = o.outcome
        if i % frames_per_chunk == 0:
            unresolved = 0
        if o == UNRENDERED:
            out.append(0.0)
        elif o == CORRUPTED or o == MISSING:
            out.append(model.s_self)
            unresolved += 1
        elif o == INTACT or o == RECOVERED:
            out.append(max(model.s_floor, model.s_prop ** unresolved) if unresolved else 1.0)
        else:
            raise ValueError(f"unknown outcome {o!r}")
    return out


def assim(frame_ssims: list[float], events: PlaybackEvents, cfg: PlaybackConfig = PlaybackConfig()) -> float:
    stall_periods = math.ceil(round(events.total_stall / cfg.frame_period, 9))
    denom = len(frame_ssims) + stall_periods
    if denom == 0:
        return 0.0
    return sum(frame_ssims) / denom


MOS_THRESHOLDS = ((0.99, "excellent"), (0.95, "good"), (0.88, "fair"), (0.50, "poor"))


def mos_class(score: float) -> str:
    if not 0.0 <= score <= 1.0:
        raise ValueError(f"aSSIM must lie in [0, 1], got {score}")
    for bound, label in MOS_THRESHOLDS:
        if score >= bound:
            return label
    return "bad"
