"""Domain model for sound events, clips, and frame grids.

Every other module exchanges annotations through the types defined here.
Times are seconds; frame grids discretize a clip into fixed-period frames
(40 ms by default) on which posteriors and training targets live.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_FRAME_PERIOD = 0.040
DEFAULT_CLIP_DURATION = 10.0

STRONG_TSV_HEADER = "filename\tonset\toffset\tevent_label"
DURATION_TSV_HEADER = "filename\tduration"


class TimelineError(ValueError):
    """Invalid annotation data or malformed label files."""


@dataclass(frozen=True, order=True)
class Event:
    """One labeled sound event with exact boundaries."""

    label: str
    onset: float
    offset: float

    def __post_init__(self):
        if not (math.isfinite(self.onset) and math.isfinite(self.offset)):
            raise TimelineError(f"event boundaries must be finite, got {self.onset}/{self.offset}")
        if self.onset < 0:
            raise TimelineError(f"event onset must be >= 0, got {self.onset}")
        if self.offset <= self.onset:
            raise TimelineError(
                f"event must have positive duration, got [{self.onset}, {self.offset})"
            )

    @property
    def duration(self) -> float:
        return self.offset - self.onset


@dataclass(frozen=True)
class ClipAnnotation:
    """All events of one clip, with the clip's duration."""

    clip_id: str
    duration: float = DEFAULT_CLIP_DURATION
    events: tuple[Event, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        if not (math.isfinite(self.duration) and self.duration > 0):
            raise TimelineError(f"clip duration must be positive and finite, got {self.duration}")
        for ev in self.events:
            if ev.offset > self.duration + 1e-9:
                raise TimelineError(
                    f"event [{ev.onset}, {ev.offset}) exceeds clip duration "
                    f"{self.duration} in clip {self.clip_id!r}"
                )

    def labels(self) -> set[str]:
        return {ev.label for ev in self.events}

    def events_of(self, label: str) -> list[Event]:
        return [ev for ev in self.events if ev.label == label]


@dataclass(frozen=True)
class FrameGrid:
    """Fixed-period frame discretization of a clip."""

    frame_period: float = DEFAULT_FRAME_PERIOD
    num_frames: int = 250

    def __post_init__(self):
        if self.frame_period <= 0:
            raise TimelineError(f"frame period must be positive, got {self.frame_period}")
        if self.num_frames < 1:
            raise TimelineError(f"grid needs at least one frame, got {self.num_frames}")

    @classmethod
    def for_duration(cls, duration: float, frame_period: float = DEFAULT_FRAME_PERIOD) -> "FrameGrid":
        return cls(frame_period=frame_period, num_frames=int(math.ceil(duration / frame_period - 1e-9)))

    @property
    def duration(self) -> float:
        return self.num_frames * self.frame_period

    def frame_centers(self) -> np.ndarray:
        return (np.arange(self.num_frames) + 0.5) * self.frame_period


@dataclass(frozen=True)
class FrameActivity:
    """Binary frame-by-class activity matrix on a grid."""

    grid: FrameGrid
    classes: tuple[str, ...]
    activity: np.ndarray  # (T, C) of {0, 1}

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        act = np.asarray(self.activity)
        if act.shape != (self.grid.num_frames, len(self.classes)):
            raise TimelineError(
                f"activity shape {act.shape} does not match grid/classes "
                f"({self.grid.num_frames}, {len(self.classes)})"
            )
        if not np.isin(act, (0, 1)).all():
            raise TimelineError("activity entries must be 0 or 1")
        act = act.astype(np.int8)
        act.setflags(write=False)
        object.__setattr__(self, "activity", act)


def rasterize(ann: ClipAnnotation, grid: FrameGrid, classes: list[str] | tuple[str, ...]) -> FrameActivity:
    """Rasterize events onto the grid: a frame is active for a class iff its
    center time lies inside [onset, offset) of an event of that class."""
    classes = tuple(classes)
    index = {c: i for i, c in enumerate(classes)}
    act = np.zeros((grid.num_frames, len(classes)), dtype=np.int8)
    centers = grid.frame_centers()
    for ev in ann.events:
        if ev.label not in index:
            raise TimelineError(f"unknown event label {ev.label!r}; known classes: {list(classes)}")
        mask = (centers >= ev.onset) & (centers < ev.offset)
        act[mask, index[ev.label]] = 1
    return FrameActivity(grid=grid, classes=classes, activity=act)


def decode_events(act: FrameActivity, clip_id: str = "", duration: float | None = None) -> ClipAnnotation:
    """Turn each maximal run of active frames into one event.

    A run over frames [a..b] becomes [a*period, (b+1)*period). No gap merging;
    smoothing is the median filter's job.
    """
    period = act.grid.frame_period
    events = []
    for c, label in enumerate(act.classes):
        col = act.activity[:, c]
        padded = np.concatenate(([0], col, [0]))
        edges = np.flatnonzero(np.diff(padded))
        for a, b in zip(edges[::2], edges[1::2]):
            events.append(Event(label, a * period, b * period))
    events.sort(key=lambda e: (e.onset, e.offset, e.label))
    if duration is None:
        duration = act.grid.duration
    return ClipAnnotation(clip_id=clip_id, duration=duration, events=tuple(events))


def format_seconds(x: float) -> str:
    """Shortest decimal with >= 3 places that parses back to exactly `x`."""
    for prec in range(3, 17):
        s = f"{x:.{prec}f}"
        if float(s) == x:
            return s
    return repr(x)


def _parse_float(text: str, what: str, path, lineno: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise TimelineError(f"{path}:{lineno}: malformed {what} {text!r}") from None


def write_strong_tsv(anns: list[ClipAnnotation], path) -> None:
    """Write strong labels in DESED-style TSV order (one row per event)."""
    lines = [STRONG_TSV_HEADER]
    for ann in anns:
        for ev in ann.events:
            lines.append(f"{ann.clip_id}\t{format_seconds(ev.onset)}\t{format_seconds(ev.offset)}\t{ev.label}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_duration_tsv(anns: list[ClipAnnotation], path) -> None:
    lines = [DURATION_TSV_HEADER]
    for ann in anns:
        lines.append(f"{ann.clip_id}\t{format_seconds(ann.duration)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_strong_tsv(path, durations: dict[str, float] | None = None) -> list[ClipAnnotation]:
    """Read strong labels; `durations` (clip_id -> seconds) supplies clip length
    and guarantees a ClipAnnotation for clips without any events."""
    path = Path(path)
    per_clip: dict[str, list[Event]] = {}
    if durations:
        for clip_id in durations:
            per_clip[clip_id] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if lineno == 1:
                if line.split("\t") != STRONG_TSV_HEADER.split("\t"):
                    raise TimelineError(f"{path}:1: expected header {STRONG_TSV_HEADER!r}, got {line!r}")
                continue
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise TimelineError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
            clip_id, onset_s, offset_s, label = parts
            onset = _parse_float(onset_s, "onset", path, lineno)
            offset = _parse_float(offset_s, "offset", path, lineno)
            if offset <= onset:
                raise TimelineError(f"{path}:{lineno}: offset {offset} <= onset {onset}")
            per_clip.setdefault(clip_id, []).append(Event(label, onset, offset))
    anns = []
    for clip_id in per_clip:
        events = sorted(per_clip[clip_id], key=lambda e: (e.onset, e.offset, e.label))
        if durations and clip_id in durations:
            dur = durations[clip_id]
        else:
            dur = max(DEFAULT_CLIP_DURATION, max((e.offset for e in events), default=0.0))
        anns.append(ClipAnnotation(clip_id=clip_id, duration=dur, events=tuple(events)))
    anns.sort(key=lambda a: a.clip_id)
    return anns


def read_duration_tsv(path) -> dict[str, float]:
    path = Path(path)
    durations: dict[str, float] = {}
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if lineno == 1:
                if line.split("\t") != DURATION_TSV_HEADER.split("\t"):
                    raise TimelineError(f"{path}:1: expected header {DURATION_TSV_HEADER!r}, got {line!r}")
                continue
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise TimelineError(f"{path}:{lineno}: expected 2 tab-separated fields, got {len(parts)}")
            durations[parts[0]] = _parse_float(parts[1], "duration", path, lineno)
    return durations
