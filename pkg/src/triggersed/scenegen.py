"""Soundscape synthesis: isolated foreground events mixed onto background
recordings, 10 s at a time, with strong labels taken from the mix metadata.

Source material lives in a plain directory tree:

    <root>/foreground/<class>/*.wav
    <root>/background/*.wav

Every source file is assigned to exactly one split (3:1:1 pattern over the
sorted file list), so no recording leaks across splits. Planning draws all
random choices from one seeded stream; rendering is pure, so a stored plan
regenerates bit-identical audio.
"""

from __future__ import annotations

import json
import math
import shutil
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from .audio import Waveform, load_wav, save_wav, wav_duration
from .data import SPLIT_NAMES
from .timeline import ClipAnnotation, Event, write_strong_tsv

# sorted source files cycle through this, giving 3:1:1 and covering every
# split within the first three files of a class
SPLIT_PATTERN = ("train", "validation", "test", "train", "train")

MIN_SOURCE_RMS = 1e-10


class SceneError(ValueError):
    """Bad synthesis configuration, source layout, or output collision."""


def assign_splits(paths) -> dict[str, str]:
    return {str(p): SPLIT_PATTERN[i % len(SPLIT_PATTERN)]
            for i, p in enumerate(sorted(str(p) for p in paths))}


@dataclass(frozen=True)
class SourceBank:
    """Per-class foreground files and background files, each pinned to one
    split."""

    foreground: dict  # class -> split -> tuple of paths
    backgrounds: dict  # split -> tuple of paths

    def __post_init__(self):
        seen: dict[str, str] = {}
        for per_split in list(self.foreground.values()) + [self.backgrounds]:
            for split, files in per_split.items():
                for path in files:
                    if seen.setdefault(path, split) != split:
                        raise SceneError(f"source file {path} assigned to two splits")

    @property
    def classes(self) -> tuple[str, ...]:
        return tuple(sorted(self.foreground))

    def foreground_for(self, label: str, split: str) -> tuple[str, ...]:
        files = self.foreground.get(label, {}).get(split, ())
        if not files:
            raise SceneError(f"no foreground sources for class {label!r} "
                             f"in split {split!r}")
        return files

    def backgrounds_for(self, split: str) -> tuple[str, ...]:
        files = self.backgrounds.get(split, ())
        if not files:
            raise SceneError(f"no background sources in split {split!r}")
        return files

    def assignment(self) -> dict[str, str]:
        out = {}
        for per_split in self.foreground.values():
            for split, files in per_split.items():
                out.update({f: split for f in files})
        for split, files in self.backgrounds.items():
            out.update({f: split for f in files})
        return out

    def source_file_count(self, label: str) -> int:
        return sum(len(files) for files in self.foreground.get(label, {}).values())


def build_bank(root) -> SourceBank:
    """Scan `<root>/foreground/<class>` and `<root>/background` and assign
    splits deterministically from the sorted file order."""
    root = Path(root)
    fg_root = root / "foreground"
    if not fg_root.is_dir():
        raise SceneError(f"missing foreground directory {fg_root}")
    foreground = {}
    for class_dir in sorted(p for p in fg_root.iterdir() if p.is_dir()):
        wavs = sorted(class_dir.glob("*.wav"))
        if not wavs:
            continue
        per_split = {s: [] for s in SPLIT_NAMES}
        for path, split in sorted(assign_splits(wavs).items()):
            per_split[split].append(path)
        foreground[class_dir.name] = {s: tuple(v) for s, v in per_split.items()}
    if not foreground:
        raise SceneError(f"no foreground classes with wav files under {fg_root}")
    bg_wavs = sorted((root / "background").glob("*.wav"))
    if not bg_wavs:
        raise SceneError(f"no background wav files under {root / 'background'}")
    bg_split = {s: [] for s in SPLIT_NAMES}
    for path, split in sorted(assign_splits(bg_wavs).items()):
        bg_split[split].append(path)
    return SourceBank(foreground=foreground,
                      backgrounds={s: tuple(v) for s, v in bg_split.items()})


@dataclass(frozen=True)
class SynthConfig:
    clip_duration: float = 10.0
    events_per_clip: tuple[int, int] = (1, 4)
    snr_db: tuple[float, float] = (6.0, 30.0)
    classes: tuple[str, ...] | None = None
    counts: tuple[int, int, int] = (6000, 2000, 2000)
    # Scalar: every clip is mixed at this background RMS. (lo, hi): each clip
    # draws its own reference level, simulating recording-gain differences.
    ref_db: float | tuple[float, float] = -50.0
    sample_rate: int = 16000
    event_duration: tuple[float, float] = (0.25, 5.0)
    pitch_semitones: tuple[float, float] = (-3.0, 3.0)

    def __post_init__(self):
        if self.clip_duration <= 0 or self.sample_rate <= 0:
            raise SceneError("clip duration and sample rate must be positive")
        lo, hi = self.events_per_clip
        if not (1 <= lo <= hi):
            raise SceneError(f"bad events_per_clip range {self.events_per_clip}")
        if self.snr_db[0] > self.snr_db[1]:
            raise SceneError(f"bad SNR range {self.snr_db}")
        if isinstance(self.ref_db, tuple) and self.ref_db[0] > self.ref_db[1]:
            raise SceneError(f"bad reference level range {self.ref_db}")
        if not (0 < self.event_duration[0] <= self.event_duration[1]):
            raise SceneError(f"bad event duration range {self.event_duration}")
        if self.pitch_semitones[0] > self.pitch_semitones[1]:
            raise SceneError(f"bad pitch range {self.pitch_semitones}")
        if len(self.counts) != len(SPLIT_NAMES) or min(self.counts) < 1:
            raise SceneError(f"split counts must be {len(SPLIT_NAMES)} positive "
                             f"integers, got {self.counts}")

    def count_for(self, split: str) -> int:
        return self.counts[SPLIT_NAMES.index(split)]

    def to_dict(self) -> dict:
        return {
            "clip_duration": self.clip_duration,
            "events_per_clip": list(self.events_per_clip),
            "snr_db": list(self.snr_db),
            "classes": list(self.classes) if self.classes else None,
            "counts": list(self.counts),
            "ref_db": list(self.ref_db) if isinstance(self.ref_db, tuple)
                      else self.ref_db,
            "sample_rate": self.sample_rate,
            "event_duration": list(self.event_duration),
            "pitch_semitones": list(self.pitch_semitones),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        for key in ("events_per_clip", "snr_db", "counts", "event_duration",
                    "pitch_semitones"):
            d[key] = tuple(d[key])
        if isinstance(d.get("ref_db"), list):
            d["ref_db"] = tuple(d["ref_db"])
        if d.get("classes"):
            d["classes"] = tuple(d["classes"])
        return cls(**d)


def duration_ratio(semitones: float) -> float:
    """Pitch shifting by resampling: +s semitones plays 2^(s/12) faster,
    so the excerpt lasts 2^(-s/12) times as long."""
    return 2.0 ** (-semitones / 12.0)


@dataclass(frozen=True)
class Placement:
    label: str
    source: str
    source_start: float
    source_dur: float
    onset: float
    snr_db: float
    pitch_semitones: float

    @property
    def realized_dur(self) -> float:
        return self.source_dur * duration_ratio(self.pitch_semitones)

    def to_dict(self) -> dict:
        return {
            "label": self.label, "source": self.source,
            "source_start": self.source_start, "source_dur": self.source_dur,
            "onset": self.onset, "snr_db": self.snr_db,
            "pitch_semitones": self.pitch_semitones,
        }


@dataclass(frozen=True)
class SynthSpec:
    clip_id: str
    background: str
    background_offset: float
    placements: tuple[Placement, ...]
    seed: int
    # Per-clip reference level; None means the config's scalar ref_db.
    ref_db: float | None = None

    def to_dict(self) -> dict:
        return {
            "clip_id": self.clip_id, "background": self.background,
            "background_offset": self.background_offset,
            "placements": [p.to_dict() for p in self.placements],
            "seed": self.seed, "ref_db": self.ref_db,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        return cls(
            clip_id=d["clip_id"], background=d["background"],
            background_offset=d["background_offset"],
            placements=tuple(Placement(**p) for p in d["placements"]),
            seed=d["seed"], ref_db=d.get("ref_db"),
        )


def plan(bank: SourceBank, cfg: SynthConfig, split: str, seed: int = 0) -> list[SynthSpec]:
    """Draw the full synthesis plan for one split from a single RNG stream.

    Per clip the draw order is: background, offset, reference level (only
    when ref_db is a range), event count, then per event: class, source,
    pitch, excerpt duration (redrawn until the shifted copy fits the clip),
    excerpt start, onset, SNR. The plan is a pure function of (seed, cfg,
    bank contents)."""
    if split not in SPLIT_NAMES:
        raise SceneError(f"unknown split {split!r}")
    classes = cfg.classes or bank.classes
    per_class = {c: bank.foreground_for(c, split) for c in classes}
    bgs = bank.backgrounds_for(split)
    src_durations = {}

    def dur_of(path):
        if path not in src_durations:
            src_durations[path] = wav_duration(path)
        return src_durations[path]

    rng = np.random.default_rng(np.random.SeedSequence([seed, SPLIT_NAMES.index(split)]))
    specs = []
    for i in range(cfg.count_for(split)):
        bg = bgs[rng.integers(len(bgs))]
        bg_offset = float(rng.uniform(0.0, dur_of(bg)))
        ref_db = (float(rng.uniform(*cfg.ref_db))
                  if isinstance(cfg.ref_db, tuple) else None)
        count = int(rng.integers(cfg.events_per_clip[0], cfg.events_per_clip[1] + 1))
        placements = []
        for _ in range(count):
            label = classes[rng.integers(len(classes))]
            source = per_class[label][rng.integers(len(per_class[label]))]
            source_total = dur_of(source)
            pitch = float(rng.uniform(*cfg.pitch_semitones))
            hi = min(cfg.event_duration[1], source_total)
            lo = min(cfg.event_duration[0], hi)
            for attempt in range(1000):
                dur = float(rng.uniform(lo, hi))
                if dur * duration_ratio(pitch) <= cfg.clip_duration:
                    break
            else:
                raise SceneError(
                    f"cannot fit an excerpt of {source} into a "
                    f"{cfg.clip_duration}s clip at pitch {pitch:+.2f}"
                )
            start = float(rng.uniform(0.0, source_total - dur))
            onset = float(rng.uniform(0.0, cfg.clip_duration - dur * duration_ratio(pitch)))
            snr = float(rng.uniform(*cfg.snr_db))
            placements.append(Placement(
                label=label, source=source, source_start=start, source_dur=dur,
                onset=onset, snr_db=snr, pitch_semitones=pitch,
            ))
        specs.append(SynthSpec(
            clip_id=f"{split}_{i:05d}.wav", background=bg,
            background_offset=bg_offset, placements=tuple(placements), seed=seed,
            ref_db=ref_db,
        ))
    return specs


def _load_resampled(path, sample_rate: int, cache: dict | None) -> np.ndarray:
    if cache is not None and path in cache:
        return cache[path]
    w = load_wav(path)
    samples = w.samples
    if w.sample_rate != sample_rate:
        g = math.gcd(sample_rate, w.sample_rate)
        samples = resample_poly(samples, sample_rate // g, w.sample_rate // g)
    if cache is not None:
        cache[path] = samples
    return samples


def _pitch_shift(x: np.ndarray, semitones: float) -> np.ndarray:
    ratio = Fraction(duration_ratio(semitones)).limit_denominator(128)
    if ratio == 1:
        return x
    return resample_poly(x, ratio.numerator, ratio.denominator)


def render(spec: SynthSpec, cfg: SynthConfig,
           cache: dict | None = None) -> tuple[Waveform, ClipAnnotation]:
    """Mix one clip. Background is looped from its offset and scaled to the
    clip's reference RMS (the spec's per-clip level if planned, else the
    config's ref_db); each foreground excerpt is pitch-shifted by resampling,
    scaled to its SNR against that reference, and added at its onset. The
    final mix is capped at 0.99 peak (labels are placement-derived and
    unaffected by the cap)."""
    sr = cfg.sample_rate
    n = int(round(cfg.clip_duration * sr))
    bg = _load_resampled(spec.background, sr, cache)
    idx = (int(round(spec.background_offset * sr)) + np.arange(n)) % len(bg)
    mix = bg[idx].copy()
    rms = float(np.sqrt(np.mean(np.square(mix))))
    if rms < MIN_SOURCE_RMS:
        raise SceneError(f"background excerpt of {spec.background} is silent")
    ref_db = spec.ref_db
    if ref_db is None:
        if isinstance(cfg.ref_db, tuple):
            raise SceneError(f"{spec.clip_id}: plan has no per-clip reference "
                             "level but the config asks for a range")
        ref_db = cfg.ref_db
    ref_rms = 10.0 ** (ref_db / 20.0)
    mix *= ref_rms / rms

    events = []
    for p in spec.placements:
        src = _load_resampled(p.source, sr, cache)
        a = int(round(p.source_start * sr))
        b = min(a + int(round(p.source_dur * sr)), len(src))
        excerpt = _pitch_shift(src[a:b], p.pitch_semitones)
        fg_rms = float(np.sqrt(np.mean(np.square(excerpt)))) if len(excerpt) else 0.0
        if fg_rms < MIN_SOURCE_RMS:
            raise SceneError(f"foreground excerpt of {p.source} "
                             f"[{p.source_start:.3f}s +{p.source_dur:.3f}s] is silent")
        excerpt = excerpt * (ref_rms * 10.0 ** (p.snr_db / 20.0) / fg_rms)
        start = min(int(round(p.onset * sr)), n - len(excerpt))
        if start < 0:
            raise SceneError(f"excerpt of {p.source} is longer than the clip")
        mix[start:start + len(excerpt)] += excerpt
        events.append(Event(p.label, start / sr, (start + len(excerpt)) / sr))

    peak = float(np.max(np.abs(mix))) if n else 0.0
    if peak > 0.99:
        mix *= 0.99 / peak
    ann = ClipAnnotation(spec.clip_id, n / sr,
                         tuple(sorted(events, key=lambda e: (e.onset, e.label))))
    return Waveform(mix, sr), ann


def dataset_stats(bank: SourceBank, classes, anns_by_split: dict) -> list[dict]:
    """Per-class rows shaped like the dataset statistics table, plus a
    totals row whose clip count is the number of unique clips."""
    all_anns = [a for anns in anns_by_split.values() for a in anns]
    rows = []
    for label in classes:
        events = [e for a in all_anns for e in a.events if e.label == label]
        rows.append({
            "class": label,
            "source files": bank.source_file_count(label),
            "synthesized clips": sum(1 for a in all_anns
                                     if any(e.label == label for e in a.events)),
            "total events": len(events),
            "total duration(min)": sum(e.duration for e in events) / 60.0,
        })
    rows.append({
        "class": "total",
        "source files": sum(r["source files"] for r in rows),
        "synthesized clips": len(all_anns),
        "total events": sum(r["total events"] for r in rows),
        "total duration(min)": sum(r["total duration(min)"] for r in rows),
    })
    return rows


def write_stats_tsv(rows: list[dict], path) -> None:
    columns = ["class", "source files", "synthesized clips", "total events",
               "total duration(min)"]
    lines = ["\t".join(columns)]
    for row in rows:
        lines.append("\t".join(
            f"{row[c]:.1f}" if c == "total duration(min)" else str(row[c])
            for c in columns
        ))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def synthesize_dataset(bank: SourceBank, cfg: SynthConfig, out_dir,
                       seed: int = 0, overwrite: bool = False) -> dict:
    """Plan and render every split, then write audio, labels, a provenance
    manifest, and the per-class statistics table. Returns the manifest."""
    out = Path(out_dir)
    existing = [out / "manifest.json"] + [out / s for s in SPLIT_NAMES]
    collisions = [p for p in existing if p.exists()]
    if collisions and not overwrite:
        raise SceneError(f"{out} already holds dataset output "
                         f"({collisions[0].name}); pass overwrite to replace it")
    for p in collisions:
        shutil.rmtree(p) if p.is_dir() else p.unlink()

    assignment = bank.assignment()
    by_split = {s: {f for f, sp in assignment.items() if sp == s} for s in SPLIT_NAMES}
    for a in SPLIT_NAMES:
        for b in SPLIT_NAMES:
            if a < b and by_split[a] & by_split[b]:
                raise SceneError(f"source files shared between {a} and {b}: "
                                 f"{sorted(by_split[a] & by_split[b])[:3]}")

    classes = cfg.classes or bank.classes
    manifest = {
        "version": 1,
        "seed": seed,
        "config": cfg.to_dict(),
        "split_sources": {s: sorted(by_split[s]) for s in SPLIT_NAMES},
        "specs": {},
    }
    anns_by_split = {}
    cache: dict = {}
    for split in SPLIT_NAMES:
        audio_dir = out / split / "audio"
        audio_dir.mkdir(parents=True, exist_ok=True)
        specs = plan(bank, cfg, split, seed)
        anns = []
        for spec in specs:
            wave, ann = render(spec, cfg, cache)
            save_wav(wave, audio_dir / spec.clip_id)
            anns.append(ann)
        write_strong_tsv(anns, out / split / "labels.tsv")
        manifest["specs"][split] = [s.to_dict() for s in specs]
        anns_by_split[split] = anns

    write_stats_tsv(dataset_stats(bank, classes, anns_by_split), out / "stats.tsv")
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def load_manifest(path) -> dict:
    manifest = json.loads(Path(path).read_text(encoding="utf-8"))
    if manifest.get("version") != 1:
        raise SceneError(f"unsupported manifest version {manifest.get('version')}")
    return manifest
