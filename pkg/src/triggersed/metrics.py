"""Evaluation for strongly labeled sound event detection.

Three scores, all macro-averaged over classes:

  * segment F1: time cut into fixed segments (1 s default); a class is active
    in a segment iff some event overlaps it with positive duration
  * event F1: onset and offset must both land within a collar (200 ms default)
    of a reference event; greedy one-to-one matching in onset order
  * PSDS: sweep decision thresholds, keep detections whose overlap with
    references passes the detection-tolerance criterion (DTC), credit
    references covered by valid detections per the ground-truth criterion
    (GTC), build per-class ROC staircases of TPR against effective FP rate,
    and integrate the cross-class effective TPR up to a maximum FP rate

The PSDS routine owns its operating-point sweep; decision thresholds from
post-processing configs play no role there.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .postproc import smooth_activity, threshold_activity
from .timeline import ClipAnnotation, format_seconds

OFFSET_RULES = ("strict_collar", "collar_or_20pct")


class MetricsError(ValueError):
    """Mismatched annotations or invalid metric configuration."""


@dataclass(frozen=True)
class MatchConfig:
    segment_length: float = 1.0
    collar: float = 0.200
    offset_rule: str = "strict_collar"

    def __post_init__(self):
        if self.segment_length <= 0:
            raise MetricsError(f"segment length must be positive, got {self.segment_length}")
        if self.collar <= 0:
            raise MetricsError(f"collar must be positive, got {self.collar}")
        if self.offset_rule not in OFFSET_RULES:
            raise MetricsError(f"unknown offset rule {self.offset_rule!r}; choose from {OFFSET_RULES}")


@dataclass(frozen=True)
class PsdsConfig:
    dtc_threshold: float = 0.7
    gtc_threshold: float = 0.7
    ct_alpha: float = 0.0
    st_alpha: float = 1.0
    max_efpr: float = 100.0  # FP per hour
    num_thresholds: int = 50
    threshold_min: float = 0.01
    threshold_max: float = 0.99

    def __post_init__(self):
        for name in ("dtc_threshold", "gtc_threshold"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise MetricsError(f"{name} must be in (0, 1], got {v}")
        if self.max_efpr <= 0:
            raise MetricsError(f"max_efpr must be positive, got {self.max_efpr}")
        if self.ct_alpha != 0.0:
            raise MetricsError("cross-trigger costing (ct_alpha != 0) is not supported")
        if self.num_thresholds < 1:
            raise MetricsError("need at least one decision threshold")

    def thresholds(self) -> np.ndarray:
        return np.linspace(self.threshold_min, self.threshold_max, self.num_thresholds)


@dataclass(frozen=True)
class F1Report:
    classes: tuple[str, ...]
    per_class: dict[str, float]
    counts: dict[str, tuple[int, int, int]]  # (tp, fp, fn)
    macro: float

    def to_dict(self) -> dict:
        return {
            "macro": self.macro,
            "per_class": dict(self.per_class),
            "counts": {c: list(v) for c, v in self.counts.items()},
        }


@dataclass(frozen=True)
class PsdsReport:
    value: float
    classes: tuple[str, ...]
    skipped_classes: tuple[str, ...]
    thresholds: np.ndarray
    roc_points: dict[str, np.ndarray]  # per class: (num_thresholds, 2) of (eFPR/h, TPR)
    tallies: dict[str, np.ndarray]  # per class: (num_thresholds, 2) of (TP, FP)
    ref_counts: dict[str, int]
    duration_hours: float
    config: PsdsConfig = field(default_factory=PsdsConfig)

    def to_dict(self) -> dict:
        return {
            "psds": self.value,
            "classes": list(self.classes),
            "skipped_classes": list(self.skipped_classes),
            "duration_hours": self.duration_hours,
            "thresholds": [float(t) for t in self.thresholds],
            "roc_points": {c: [[float(e), float(t)] for e, t in pts]
                           for c, pts in self.roc_points.items()},
        }

    def write_roc_tsv(self, path) -> None:
        lines = ["class\tthreshold\tefpr_per_hour\ttpr"]
        for cls in self.classes:
            for tau, (efpr, tpr) in zip(self.thresholds, self.roc_points[cls]):
                lines.append(f"{cls}\t{format_seconds(float(tau))}\t{efpr!r}\t{tpr!r}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# --- annotation bookkeeping --------------------------------------------------


def _index_clips(anns, what: str) -> dict[str, ClipAnnotation]:
    by_id = {}
    for ann in anns:
        if ann.clip_id in by_id:
            raise MetricsError(f"duplicate clip id {ann.clip_id!r} in {what}")
        by_id[ann.clip_id] = ann
    return by_id


def _align(refs, preds):
    ref_map = _index_clips(refs, "references")
    pred_map = _index_clips(preds, "predictions")
    unknown = set(pred_map) - set(ref_map)
    if unknown:
        raise MetricsError(f"predictions for unknown clip ids: {sorted(unknown)}")
    for clip_id, pred in pred_map.items():
        ref = ref_map[clip_id]
        if pred.duration != ref.duration:
            raise MetricsError(
                f"clip {clip_id!r}: prediction duration {pred.duration} "
                f"!= reference duration {ref.duration}"
            )
    return ref_map, pred_map


def _class_set(ref_map, pred_map, class_names) -> tuple[str, ...]:
    if class_names is not None:
        return tuple(class_names)
    labels = set()
    for ann in list(ref_map.values()) + list(pred_map.values()):
        labels |= ann.labels()
    return tuple(sorted(labels))


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def _build_report(classes, counts) -> F1Report:
    per_class = {c: _f1(*counts[c]) for c in classes}
    macro = float(np.mean([per_class[c] for c in classes])) if classes else 0.0
    return F1Report(classes=tuple(classes), per_class=per_class,
                    counts={c: tuple(counts[c]) for c in classes}, macro=macro)


# --- segment F1 --------------------------------------------------------------


def _segment_activity(events, num_segments: int, seg_len: float) -> np.ndarray:
    active = np.zeros(num_segments, dtype=bool)
    for ev in events:
        first = max(0, int(ev.onset / seg_len) - 1)
        last = min(num_segments - 1, int(ev.offset / seg_len) + 1)
        for k in range(first, last + 1):
            if min(ev.offset, (k + 1) * seg_len) - max(ev.onset, k * seg_len) > 0:
                active[k] = True
    return active


def segment_f1(refs, preds, config: MatchConfig = MatchConfig(), class_names=None) -> F1Report:
    ref_map, pred_map = _align(refs, preds)
    classes = _class_set(ref_map, pred_map, class_names)
    counts = {c: [0, 0, 0] for c in classes}
    empty = ClipAnnotation("", 1.0)
    for clip_id, ref in ref_map.items():
        pred = pred_map.get(clip_id, empty)
        num_segments = int(math.ceil(ref.duration / config.segment_length - 1e-9))
        for c in classes:
            ra = _segment_activity(ref.events_of(c), num_segments, config.segment_length)
            pa = _segment_activity(pred.events_of(c), num_segments, config.segment_length)
            counts[c][0] += int(np.sum(ra & pa))
            counts[c][1] += int(np.sum(~ra & pa))
            counts[c][2] += int(np.sum(ra & ~pa))
    return _build_report(classes, counts)


# --- event F1 ----------------------------------------------------------------


def _boundaries_match(ref, pred, config: MatchConfig) -> bool:
    if abs(pred.onset - ref.onset) > config.collar:
        return False
    tolerance = config.collar
    if config.offset_rule == "collar_or_20pct":
        tolerance = max(config.collar, 0.2 * ref.duration)
    return abs(pred.offset - ref.offset) <= tolerance


def _match_counts(ref_events, pred_events, config: MatchConfig) -> tuple[int, int, int]:
    refs = sorted(ref_events, key=lambda e: (e.onset, e.offset))
    preds = sorted(pred_events, key=lambda e: (e.onset, e.offset))
    used = [False] * len(refs)
    tp = fp = 0
    for pred in preds:
        for j, ref in enumerate(refs):
            if not used[j] and _boundaries_match(ref, pred, config):
                used[j] = True
                tp += 1
                break
        else:
            fp += 1
    fn = used.count(False)
    return tp, fp, fn


def event_f1(refs, preds, config: MatchConfig = MatchConfig(), class_names=None) -> F1Report:
    ref_map, pred_map = _align(refs, preds)
    classes = _class_set(ref_map, pred_map, class_names)
    counts = {c: [0, 0, 0] for c in classes}
    empty = ClipAnnotation("", 1.0)
    for clip_id, ref in ref_map.items():
        pred = pred_map.get(clip_id, empty)
        for c in classes:
            tp, fp, fn = _match_counts(ref.events_of(c), pred.events_of(c), config)
            counts[c][0] += tp
            counts[c][1] += fp
            counts[c][2] += fn
    return _build_report(classes, counts)


# --- PSDS --------------------------------------------------------------------


def _decode_runs(column: np.ndarray, period: float) -> list[tuple[float, float]]:
    padded = np.concatenate(([0], column, [0]))
    edges = np.flatnonzero(np.diff(padded))
    return [(a * period, b * period) for a, b in zip(edges[::2], edges[1::2])]


def _overlap(a, b) -> float:
    return max(0.0, min(a[1], b[1]) - max(a[0], b[0]))


def _dtc_gtc_counts(detections, references, dtc, gtc) -> tuple[int, int]:
    """(TP over references, FP over detections) under the intersection criteria."""
    valid = []
    fp = 0
    for det in detections:
        covered = sum(_overlap(det, ref) for ref in references)
        if covered / (det[1] - det[0]) >= dtc:
            valid.append(det)
        else:
            fp += 1
    tp = 0
    for ref in references:
        covered = sum(_overlap(det, ref) for det in valid)
        if covered / (ref[1] - ref[0]) >= gtc:
            tp += 1
    return tp, fp


def psds(refs, posteriors: dict[str, np.ndarray], class_names, postproc_window: int = 1,
         config: PsdsConfig = PsdsConfig(), frame_period: float = 0.04) -> PsdsReport:
    """PSDS over a threshold sweep; posteriors are (T, C) per clip with C
    matching class_names. The median window is applied at every threshold
    before decoding."""
    classes = tuple(class_names)
    ref_map = _index_clips(refs, "references")
    missing = set(ref_map) - set(posteriors)
    if missing:
        raise MetricsError(f"no posteriors for clips: {sorted(missing)}")
    ref_intervals = {
        clip_id: {c: [(e.onset, e.offset) for e in ann.events_of(c)] for c in classes}
        for clip_id, ann in ref_map.items()
    }
    for clip_id, ann in ref_map.items():
        p = posteriors[clip_id]
        if p.ndim != 2 or p.shape[1] != len(classes):
            raise MetricsError(f"clip {clip_id!r}: posterior shape {p.shape} "
                               f"does not cover {len(classes)} classes")
    total_hours = sum(ann.duration for ann in ref_map.values()) / 3600.0
    if total_hours <= 0:
        raise MetricsError("total dataset duration must be positive")
    ref_counts = {c: sum(len(ref_intervals[k][c]) for k in ref_map) for c in classes}
    skipped = tuple(c for c in classes if ref_counts[c] == 0)
    if skipped:
        warnings.warn(f"classes without reference events excluded from PSDS: {list(skipped)}",
                      stacklevel=2)
    scored = tuple(c for c in classes if ref_counts[c] > 0)
    if not scored:
        raise MetricsError("PSDS needs at least one class with reference events")

    thresholds = config.thresholds()
    smoothing = bool(np.any(np.asarray(postproc_window) != 1))
    tallies = {c: np.zeros((len(thresholds), 2), dtype=np.int64) for c in classes}
    for ti, tau in enumerate(thresholds):
        for clip_id, ann in ref_map.items():
            act = threshold_activity(posteriors[clip_id], tau)
            if smoothing:
                act = smooth_activity(act, postproc_window)
            for ci, c in enumerate(classes):
                detections = _decode_runs(act[:, ci], frame_period)
                tp, fp = _dtc_gtc_counts(detections, ref_intervals[clip_id][c],
                                         config.dtc_threshold, config.gtc_threshold)
                tallies[c][ti, 0] += tp
                tallies[c][ti, 1] += fp

    roc_points = {}
    for c in classes:
        tpr = tallies[c][:, 0] / ref_counts[c] if ref_counts[c] else np.zeros(len(thresholds))
        efpr = tallies[c][:, 1] / total_hours
        roc_points[c] = np.column_stack([efpr, tpr])

    value = _integrate_psds({c: roc_points[c] for c in scored}, config)
    return PsdsReport(value=value, classes=classes, skipped_classes=skipped,
                      thresholds=thresholds, roc_points=roc_points, tallies=tallies,
                      ref_counts=ref_counts, duration_hours=total_hours, config=config)


def _staircase(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Upper envelope of operating points plus the implicit (0, 0): at
    abscissa e the value is the best TPR among points with eFPR <= e.
    Returns (breakpoints, values), both sorted, values non-decreasing."""
    pts = np.vstack([[0.0, 0.0], points])
    order = np.argsort(pts[:, 0], kind="stable")
    e_sorted = pts[order, 0]
    v_running = np.maximum.accumulate(pts[order, 1])
    # collapse duplicate abscissae to their best value
    breaks, last_idx = np.unique(e_sorted, return_index=True)
    idx = np.append(last_idx[1:], len(e_sorted)) - 1
    return breaks, v_running[idx]


def _staircase_value(breaks: np.ndarray, values: np.ndarray, e: float) -> float:
    i = np.searchsorted(breaks, e, side="right") - 1
    return float(values[i]) if i >= 0 else 0.0


def _integrate_psds(roc_points: dict[str, np.ndarray], config: PsdsConfig) -> float:
    envelopes = {c: _staircase(pts) for c, pts in roc_points.items()}
    edges = {0.0, config.max_efpr}
    for breaks, _ in envelopes.values():
        edges.update(float(b) for b in breaks if 0.0 < b < config.max_efpr)
    edges = sorted(edges)
    area = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        tprs = np.array([_staircase_value(*env, lo) for env in envelopes.values()])
        etpr = max(0.0, float(tprs.mean() - config.st_alpha * tprs.std()))
        area += etpr * (hi - lo)
    return area / config.max_efpr
