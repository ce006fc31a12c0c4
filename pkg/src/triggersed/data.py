"""Dataset assembly: a split directory (audio + strong labels) becomes
stacked feature/target arrays ready for training.

Expected layout, as written by the synthesizer:

    <root>/<split>/audio/*.wav
    <root>/<split>/labels.tsv

Clips without any events carry no label rows; the audio directory is the
clip universe. Embedding files (one per clip, same stem) may replace the
log-mel frontend for imported-feature workflows.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import load_wav, wav_duration
from .features import FrontendConfig, extract_features, read_embeddings
from .timeline import ClipAnnotation, FrameGrid, rasterize, read_strong_tsv

SPLIT_NAMES = ("train", "validation", "test")


class DataError(ValueError):
    """Missing files or inconsistent split contents."""


@dataclass
class DatasetSplit:
    name: str
    clip_ids: list[str]
    features: np.ndarray  # (N, T, D)
    targets: np.ndarray  # (N, T, C)
    refs: list[ClipAnnotation]
    class_names: tuple[str, ...]
    frame_period: float

    def __len__(self) -> int:
        return len(self.clip_ids)

    def posteriors_as_dict(self, posteriors: np.ndarray) -> dict[str, np.ndarray]:
        if posteriors.shape[0] != len(self.clip_ids):
            raise DataError(f"{posteriors.shape[0]} posterior stacks for "
                            f"{len(self.clip_ids)} clips")
        return {cid: posteriors[i] for i, cid in enumerate(self.clip_ids)}


def discover_classes(root, splits=SPLIT_NAMES) -> tuple[str, ...]:
    """Sorted union of event labels over every split's label file."""
    labels = set()
    for split in splits:
        tsv = Path(root) / split / "labels.tsv"
        if not tsv.exists():
            continue
        for ann in read_strong_tsv(tsv):
            labels |= ann.labels()
    if not labels:
        raise DataError(f"no event labels found under {root}")
    return tuple(sorted(labels))


def load_split(root, split: str, frontend: FrontendConfig, class_names=None,
               use_embeddings: bool = False) -> DatasetSplit:
    split_dir = Path(root) / split
    audio_dir = split_dir / "audio"
    if not audio_dir.is_dir():
        raise DataError(f"missing audio directory {audio_dir}")
    wavs = sorted(audio_dir.glob("*.wav"))
    if not wavs:
        raise DataError(f"no wav files in {audio_dir}")
    durations = {p.name: wav_duration(p) for p in wavs}
    anns = read_strong_tsv(split_dir / "labels.tsv", durations=durations)
    by_id = {a.clip_id: a for a in anns}
    unknown = set(by_id) - set(durations)
    if unknown:
        raise DataError(f"{split_dir / 'labels.tsv'} labels clips without audio: "
                        f"{sorted(unknown)}")
    if class_names is None:
        class_names = tuple(sorted(set().union(*(a.labels() for a in anns)) if anns else ()))
    class_names = tuple(class_names)

    clip_ids, feature_rows, target_rows, refs = [], [], [], []
    num_frames = None
    period = None
    for wav_path in wavs:
        clip_id = wav_path.name
        ann = by_id.get(clip_id) or ClipAnnotation(clip_id, durations[clip_id])
        if use_embeddings:
            emb_path = split_dir / "embeddings" / (wav_path.stem + ".emb")
            if not emb_path.exists():
                raise DataError(f"missing embedding file {emb_path}")
            seq = read_embeddings(emb_path)
        else:
            seq = extract_features(load_wav(wav_path), frontend)
        if num_frames is None:
            num_frames, period = seq.frames.shape[0], seq.frame_period
        elif seq.frames.shape[0] != num_frames or seq.frame_period != period:
            raise DataError(f"{clip_id}: {seq.frames.shape[0]} frames at "
                            f"{seq.frame_period}s, expected {num_frames} at {period}s; "
                            f"splits must have uniform clip geometry")
        grid = FrameGrid(period, num_frames)
        target = rasterize(ann, grid, class_names).activity.astype(np.float64)
        clip_ids.append(clip_id)
        feature_rows.append(seq.frames)
        target_rows.append(target)
        refs.append(ann)
    return DatasetSplit(
        name=split, clip_ids=clip_ids,
        features=np.stack(feature_rows), targets=np.stack(target_rows),
        refs=refs, class_names=class_names, frame_period=period,
    )


def feature_stats(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean and std over all frames of all clips (std floored
    to keep constant dimensions harmless)."""
    flat = features.reshape(-1, features.shape[-1])
    mean = flat.mean(axis=0)
    std = np.maximum(flat.std(axis=0), 1e-8)
    return mean, std


def apply_feature_norm(features: np.ndarray, stats) -> np.ndarray:
    mean, std = stats
    return (features - mean) / std
