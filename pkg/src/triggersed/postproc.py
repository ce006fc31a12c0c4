"""Posterior post-processing: thresholding, median smoothing, event decoding,
and validation-driven selection of the smoothing window and class thresholds.

The tuning protocol is two-stage: pick one global median window first, then
pick per-class decision thresholds on a fixed grid with that window in place.
Ties always fall toward the less trigger-happy option (smaller window, higher
threshold).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .timeline import ClipAnnotation, FrameActivity, FrameGrid, decode_events

WINDOW_GRID = tuple(range(1, 32, 2))
THRESHOLD_GRID = tuple(round(0.05 * k, 2) for k in range(1, 20))
OBJECTIVES = ("psds1", "event_f1")


class PostprocError(ValueError):
    """Invalid post-processing configuration or inputs."""


def _check_window(w):
    if not isinstance(w, (int, np.integer)) or w < 1 or w % 2 == 0:
        raise PostprocError(f"median window must be an odd integer >= 1, got {w!r}")


@dataclass(frozen=True)
class PostprocConfig:
    """Median window (global, or one per class) plus decision thresholds
    (shared scalar, or one per class)."""

    median_window: int | tuple[int, ...] = 1
    class_thresholds: float | tuple[float, ...] = 0.5

    def __post_init__(self):
        if isinstance(self.median_window, (list, tuple)):
            object.__setattr__(self, "median_window", tuple(int(w) for w in self.median_window))
            for w in self.median_window:
                _check_window(w)
        else:
            _check_window(self.median_window)
        thresholds = self.class_thresholds
        if isinstance(thresholds, (list, tuple)):
            thresholds = tuple(float(t) for t in thresholds)
            object.__setattr__(self, "class_thresholds", thresholds)
        else:
            thresholds = (float(thresholds),)
        for t in thresholds:
            if not 0.0 < t < 1.0:
                raise PostprocError(f"thresholds must lie strictly inside (0, 1), got {t}")

    def windows(self, num_classes: int) -> np.ndarray:
        if isinstance(self.median_window, tuple):
            if len(self.median_window) != num_classes:
                raise PostprocError(
                    f"{len(self.median_window)} windows configured for {num_classes} classes"
                )
            return np.asarray(self.median_window, dtype=np.int64)
        return np.full(num_classes, self.median_window, dtype=np.int64)

    def thresholds(self, num_classes: int) -> np.ndarray:
        if isinstance(self.class_thresholds, tuple):
            if len(self.class_thresholds) != num_classes:
                raise PostprocError(
                    f"{len(self.class_thresholds)} thresholds configured for {num_classes} classes"
                )
            return np.asarray(self.class_thresholds, dtype=np.float64)
        return np.full(num_classes, self.class_thresholds, dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "median_window": list(self.median_window)
            if isinstance(self.median_window, tuple) else self.median_window,
            "class_thresholds": list(self.class_thresholds)
            if isinstance(self.class_thresholds, tuple) else self.class_thresholds,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PostprocConfig":
        return cls(
            median_window=tuple(d["median_window"]) if isinstance(d["median_window"], list)
            else d["median_window"],
            class_thresholds=tuple(d["class_thresholds"])
            if isinstance(d["class_thresholds"], list) else d["class_thresholds"],
        )


# --- array kernels -----------------------------------------------------------


def threshold_activity(posteriors: np.ndarray, thresholds) -> np.ndarray:
    """(T, C) posteriors -> int8 activity; a frame is active at equality."""
    p = np.asarray(posteriors, dtype=np.float64)
    if p.ndim != 2:
        raise PostprocError(f"expected (T, C) posteriors, got shape {p.shape}")
    if not np.isfinite(p).all() or p.min() < 0.0 or p.max() > 1.0:
        raise PostprocError("posteriors must be finite and within [0, 1]")
    return (p >= np.asarray(thresholds, dtype=np.float64)).astype(np.int8)


def smooth_activity(act: np.ndarray, windows) -> np.ndarray:
    """Majority vote in a centered window per class; edges shrink the window
    symmetrically so the vote count stays odd."""
    act = np.asarray(act)
    T, C = act.shape
    windows = np.broadcast_to(np.asarray(windows, dtype=np.int64), (C,))
    for w in windows:
        _check_window(int(w))
    out = np.empty_like(act)
    cs = np.vstack([np.zeros((1, C), dtype=np.int64), np.cumsum(act, axis=0, dtype=np.int64)])
    t = np.arange(T)
    for w in np.unique(windows):
        cols = np.flatnonzero(windows == w)
        if w == 1:
            out[:, cols] = act[:, cols]
            continue
        h_eff = np.minimum(w // 2, np.minimum(t, T - 1 - t))
        lo = t - h_eff
        hi = t + h_eff + 1
        counts = cs[hi][:, cols] - cs[lo][:, cols]
        out[:, cols] = (2 * counts > (hi - lo)[:, None]).astype(act.dtype)
    return out


# --- domain-type operations --------------------------------------------------


def binarize(posteriors: np.ndarray, thresholds, grid: FrameGrid, classes) -> FrameActivity:
    classes = tuple(classes)
    act = threshold_activity(posteriors, thresholds)
    return FrameActivity(grid=grid, classes=classes, activity=act)


def median_filter(act: FrameActivity, window) -> FrameActivity:
    smoothed = smooth_activity(act.activity, window)
    return FrameActivity(grid=act.grid, classes=act.classes, activity=smoothed)


def clip_events_to(events, duration: float):
    """Clamp event boundaries to [0, duration); events entirely past the end
    are dropped (the frame grid may overshoot a clip by a partial frame)."""
    kept = []
    for ev in events:
        offset = min(ev.offset, duration)
        if ev.onset < duration and offset > ev.onset:
            kept.append(ev if ev.offset == offset else type(ev)(ev.label, ev.onset, offset))
    return tuple(kept)


def apply_postproc(posteriors: np.ndarray, config: PostprocConfig, grid: FrameGrid,
                   classes, clip_id: str = "", duration: float | None = None) -> ClipAnnotation:
    """binarize -> median filter -> decode events, under one config."""
    classes = tuple(classes)
    act = threshold_activity(posteriors, config.thresholds(len(classes)))
    act = smooth_activity(act, config.windows(len(classes)))
    fa = FrameActivity(grid=grid, classes=classes, activity=act)
    decoded = decode_events(fa, clip_id=clip_id)
    if duration is None:
        return decoded
    return ClipAnnotation(clip_id=clip_id, duration=duration,
                          events=clip_events_to(decoded.events, duration))


# --- validation-set tuning ---------------------------------------------------


@dataclass(frozen=True)
class TuneResult:
    config: PostprocConfig
    objective: str
    objective_value: float
    default_value: float
    window_scores: dict[int, float] = field(default_factory=dict)


def _single_class_events(posterior_col, window, threshold, period, label):
    act = (np.asarray(posterior_col) >= threshold).astype(np.int8)[:, None]
    act = smooth_activity(act, np.array([window]))
    grid = FrameGrid(frame_period=period, num_frames=act.shape[0])
    fa = FrameActivity(grid=grid, classes=(label,), activity=act)
    return decode_events(fa).events


def _class_f1(refs_by_clip, posteriors, label, col, window, threshold, period, match_config):
    from .metrics import event_f1

    preds = []
    refs = []
    for clip_id, ann in refs_by_clip.items():
        events = _single_class_events(posteriors[clip_id][:, col], window, threshold,
                                      period, label)
        preds.append(ClipAnnotation(clip_id, ann.duration, clip_events_to(events, ann.duration)))
        refs.append(ClipAnnotation(clip_id, ann.duration, tuple(ann.events_of(label))))
    return event_f1(refs, preds, match_config, class_names=[label]).macro


def _best_threshold(refs_by_clip, posteriors, label, col, window, period,
                    match_config, grid_points):
    best_f1, best_t = -1.0, None
    for threshold in grid_points:
        f1 = _class_f1(refs_by_clip, posteriors, label, col, window, threshold,
                       period, match_config)
        if f1 >= best_f1:  # ties fall to the higher threshold
            best_f1, best_t = f1, threshold
    return best_t, best_f1


def tune(refs, posteriors: dict[str, np.ndarray], classes, objective: str = "psds1",
         frame_period: float = 0.04, psds_config=None, match_config=None,
         windows=WINDOW_GRID, threshold_grid=THRESHOLD_GRID) -> TuneResult:
    """Pick (median window, class thresholds) on a validation set.

    The window maximizes the chosen objective over `windows`; thresholds then
    maximize per-class event F1 on `threshold_grid` (thresholds do not enter
    PSDS, which sweeps its own operating points). With objective="event_f1"
    the window choice already accounts for the best thresholds under it, so
    the tuned configuration can never score below the (1, 0.5) default.
    """
    from .metrics import MatchConfig, PsdsConfig, event_f1, psds

    if objective not in OBJECTIVES:
        raise PostprocError(f"unknown objective {objective!r}; choose from {OBJECTIVES}")
    refs = list(refs)
    if not refs or not posteriors:
        raise PostprocError("tuning needs a non-empty validation set")
    classes = tuple(classes)
    psds_config = psds_config or PsdsConfig()
    match_config = match_config or MatchConfig()
    refs_by_clip = {ann.clip_id: ann for ann in refs}

    def macro_f1_with(window, thresholds):
        preds = [
            apply_postproc(posteriors[ann.clip_id],
                           PostprocConfig(window, tuple(thresholds)),
                           FrameGrid(frame_period, posteriors[ann.clip_id].shape[0]),
                           classes, clip_id=ann.clip_id, duration=ann.duration)
            for ann in refs
        ]
        return event_f1(refs, preds, match_config, class_names=classes).macro

    window_scores = {}
    per_window_thresholds = {}
    for window in windows:
        if objective == "psds1":
            score = psds(refs, posteriors, classes, postproc_window=window,
                         config=psds_config, frame_period=frame_period).value
        else:
            chosen = [
                _best_threshold(refs_by_clip, posteriors, label, col, window,
                                frame_period, match_config, threshold_grid)[0]
                for col, label in enumerate(classes)
            ]
            per_window_thresholds[window] = tuple(chosen)
            score = macro_f1_with(window, chosen)
        window_scores[window] = score
    best_window = max(window_scores, key=lambda w: (window_scores[w], -w))

    if objective == "event_f1":
        thresholds = per_window_thresholds[best_window]
    else:
        thresholds = tuple(
            _best_threshold(refs_by_clip, posteriors, label, col, best_window,
                            frame_period, match_config, threshold_grid)[0]
            for col, label in enumerate(classes)
        )
    config = PostprocConfig(median_window=best_window, class_thresholds=thresholds)

    if objective == "psds1":
        objective_value = window_scores[best_window]
        default_value = window_scores.get(1) if 1 in window_scores else psds(
            refs, posteriors, classes, postproc_window=1,
            config=psds_config, frame_period=frame_period).value
    else:
        objective_value = macro_f1_with(best_window, thresholds)
        default_value = macro_f1_with(1, [0.5] * len(classes))
    return TuneResult(config=config, objective=objective, objective_value=objective_value,
                      default_value=default_value, window_scores=window_scores)
