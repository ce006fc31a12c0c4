"""Synthesis tests: bank splitting, plan determinism, mix levels, layout."""

import json

import numpy as np
import pytest

from triggersed.audio import Waveform, load_wav, save_wav
from triggersed.data import load_split
from triggersed.features import FrontendConfig
from triggersed.scenegen import (
    Placement,
    SceneError,
    SourceBank,
    SynthConfig,
    SynthSpec,
    build_bank,
    dataset_stats,
    load_manifest,
    plan,
    render,
    synthesize_dataset,
)

SR = 8000


def rms_db(x):
    return 20.0 * np.log10(np.sqrt(np.mean(np.square(x))))


def make_sources(tmp_path, classes=("clap", "hum"), per_class=5, num_bg=5):
    root = tmp_path / "sources"
    for ci, label in enumerate(classes):
        class_dir = root / "foreground" / label
        class_dir.mkdir(parents=True)
        for j in range(per_class):
            dur = 1.5 + 0.25 * j
            t = np.arange(int(SR * dur)) / SR
            x = 0.5 * np.sin(2 * np.pi * (300.0 + 150.0 * ci + 15.0 * j) * t)
            save_wav(Waveform(x, SR), class_dir / f"{label}{j}.wav")
    bg_dir = root / "background"
    bg_dir.mkdir(parents=True)
    rng = np.random.default_rng(0)
    for j in range(num_bg):
        x = 0.1 * rng.standard_normal(int(SR * 12.0))
        save_wav(Waveform(x, SR), bg_dir / f"bg{j}.wav")
    return root


def small_config(**kw):
    defaults = dict(classes=("clap", "hum"), counts=(6, 2, 2), sample_rate=SR,
                    event_duration=(0.3, 1.2))
    defaults.update(kw)
    return SynthConfig(**defaults)


# --- bank --------------------------------------------------------------------


def test_build_bank_splits_three_one_one(tmp_path):
    bank = build_bank(make_sources(tmp_path))
    assert bank.classes == ("clap", "hum")
    for label in bank.classes:
        sizes = {s: len(bank.foreground[label][s]) for s in ("train", "validation", "test")}
        assert sizes == {"train": 3, "validation": 1, "test": 1}
    assert len(bank.backgrounds["train"]) == 3
    assignment = bank.assignment()
    assert len(assignment) == 15  # 2 classes x 5 + 5 backgrounds, each exactly once


def test_build_bank_requires_sources(tmp_path):
    with pytest.raises(SceneError, match="foreground"):
        build_bank(tmp_path)


def test_bank_rejects_cross_split_file(tmp_path):
    with pytest.raises(SceneError, match="two splits"):
        SourceBank(
            foreground={"a": {"train": ("x.wav",), "test": ("x.wav",)}},
            backgrounds={},
        )


def test_bank_missing_split_sources_named(tmp_path):
    bank = build_bank(make_sources(tmp_path, per_class=1))  # train-only classes
    cfg = small_config()
    with pytest.raises(SceneError, match="'clap'.*'validation'"):
        plan(bank, cfg, "validation", seed=0)


# --- plan --------------------------------------------------------------------


def test_plan_is_deterministic(tmp_path):
    bank = build_bank(make_sources(tmp_path))
    cfg = small_config()
    assert plan(bank, cfg, "train", seed=7) == plan(bank, cfg, "train", seed=7)
    assert plan(bank, cfg, "train", seed=7) != plan(bank, cfg, "train", seed=8)
    assert plan(bank, cfg, "train", seed=7) != plan(bank, cfg, "validation", seed=7)


def test_plan_degenerate_single_event(tmp_path):
    bank = build_bank(make_sources(tmp_path))
    cfg = small_config(classes=("hum",), events_per_clip=(1, 1))
    specs = plan(bank, cfg, "train", seed=0)
    assert len(specs) == 6
    for spec in specs:
        assert len(spec.placements) == 1
        assert spec.placements[0].label == "hum"


def test_plan_respects_configured_ranges(tmp_path):
    bank = build_bank(make_sources(tmp_path))
    cfg = small_config(counts=(40, 2, 2))
    for spec in plan(bank, cfg, "train", seed=1):
        assert spec.clip_id.startswith("train_")
        for p in spec.placements:
            assert 1 <= len(spec.placements) <= 4
            assert cfg.snr_db[0] <= p.snr_db <= cfg.snr_db[1]
            assert cfg.pitch_semitones[0] <= p.pitch_semitones <= cfg.pitch_semitones[1]
            assert 0.0 <= p.onset
            assert p.onset + p.realized_dur <= cfg.clip_duration + 1e-9
            assert 0.0 <= p.source_start
            assert p.source_dur > 0.0


def test_plan_class_counts_near_multinomial(tmp_path):
    bank = build_bank(make_sources(tmp_path, classes=("a", "b", "c"), per_class=5))
    cfg = SynthConfig(classes=("a", "b", "c"), counts=(600, 2, 2),
                      sample_rate=SR, event_duration=(0.3, 1.2))
    specs = plan(bank, cfg, "train", seed=0)
    labels = [p.label for s in specs for p in s.placements]
    total = len(labels)
    expectation = total / 3.0
    bound = 3.0 * np.sqrt(total * (1.0 / 3.0) * (2.0 / 3.0))
    for label in ("a", "b", "c"):
        assert abs(labels.count(label) - expectation) <= bound


def test_plan_reference_level_range(tmp_path):
    bank = build_bank(make_sources(tmp_path))
    scalar = plan(bank, small_config(), "train", seed=1)
    assert all(s.ref_db is None for s in scalar)
    cfg = small_config(counts=(40, 2, 2), ref_db=(-62.0, -38.0))
    specs = plan(bank, cfg, "train", seed=1)
    levels = [s.ref_db for s in specs]
    assert all(-62.0 <= v <= -38.0 for v in levels)
    assert len(set(levels)) > 1
    assert plan(bank, cfg, "train", seed=1) == specs


def test_spec_dict_roundtrip(tmp_path):
    bank = build_bank(make_sources(tmp_path))
    for ref_db in (-50.0, (-62.0, -38.0)):
        spec = plan(bank, small_config(ref_db=ref_db), "train", seed=3)[0]
        assert SynthSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


# --- render ------------------------------------------------------------------


def background_only(bank, cfg, offset=0.0):
    return SynthSpec("bg.wav", bank.backgrounds["train"][0], offset, (), 0)


def test_render_background_only(tmp_path):
    bank = build_bank(make_sources(tmp_path))
    cfg = small_config()
    wave, ann = render(background_only(bank, cfg), cfg)
    assert wave.duration == 10.0
    assert ann.events == ()
    assert rms_db(wave.samples) == pytest.approx(cfg.ref_db, abs=1e-9)


def test_render_per_clip_reference_level(tmp_path):
    bank = build_bank(make_sources(tmp_path))
    cfg = small_config(ref_db=(-62.0, -38.0))
    spec = background_only(bank, cfg)
    leveled = SynthSpec(spec.clip_id, spec.background, spec.background_offset,
                        (), 0, ref_db=-44.0)
    wave, _ = render(leveled, cfg)
    assert rms_db(wave.samples) == pytest.approx(-44.0, abs=1e-9)
    with pytest.raises(SceneError, match="per-clip reference"):
        render(spec, cfg)  # range config but an unleveled plan


def test_render_snr_zero_matches_background_level(tmp_path):
    bank = build_bank(make_sources(tmp_path))
    cfg = small_config()
    src = bank.foreground["hum"]["train"][0]
    spec = SynthSpec("x.wav", bank.backgrounds["train"][0], 0.0,
                     (Placement("hum", src, 0.2, 1.0, 3.0, 0.0, 0.0),), 0)
    wave, ann = render(spec, cfg)
    base, _ = render(background_only(bank, cfg), cfg)
    ev = ann.events[0]
    assert (ev.onset, ev.offset) == (3.0, 4.0)
    lo, hi = int(ev.onset * SR), int(ev.offset * SR)
    added = np.asarray(wave.samples[lo:hi]) - np.asarray(base.samples[lo:hi])
    assert abs(rms_db(added) - rms_db(base.samples[lo:hi])) <= 0.5


@pytest.mark.parametrize("semitones,expected", [(12.0, 0.5), (-12.0, 2.0)])
def test_render_extreme_pitch_scales_duration(tmp_path, semitones, expected):
    bank = build_bank(make_sources(tmp_path))
    cfg = small_config()
    src = bank.foreground["clap"]["train"][0]
    spec = SynthSpec("x.wav", bank.backgrounds["train"][0], 0.0,
                     (Placement("clap", src, 0.1, 1.0, 2.0, 12.0, semitones),), 0)
    _, ann = render(spec, cfg)
    ev = ann.events[0]
    assert ev.duration == pytest.approx(expected, abs=2.0 / SR)


def test_render_event_lifts_rms(tmp_path):
    bank = build_bank(make_sources(tmp_path))
    cfg = small_config()
    src = bank.foreground["clap"]["train"][1]
    spec = SynthSpec("x.wav", bank.backgrounds["train"][0], 1.0,
                     (Placement("clap", src, 0.0, 1.0, 5.0, 6.0, 0.0),), 0)
    wave, ann = render(spec, cfg)
    base, _ = render(background_only(bank, cfg, offset=1.0), cfg)
    ev = ann.events[0]
    lo, hi = int(ev.onset * SR), int(ev.offset * SR)
    uplift = rms_db(wave.samples[lo:hi]) - rms_db(base.samples[lo:hi])
    assert uplift >= 1.0


def test_render_caps_peak(tmp_path):
    bank = build_bank(make_sources(tmp_path))
    cfg = small_config(ref_db=-3.0)
    src = bank.foreground["hum"]["train"][0]
    spec = SynthSpec("x.wav", bank.backgrounds["train"][0], 0.0,
                     (Placement("hum", src, 0.0, 1.0, 4.0, 20.0, 0.0),), 0)
    wave, _ = render(spec, cfg)
    assert np.max(np.abs(wave.samples)) <= 0.99 + 1e-12


def test_render_is_deterministic(tmp_path):
    bank = build_bank(make_sources(tmp_path))
    cfg = small_config()
    spec = plan(bank, cfg, "train", seed=5)[0]
    a, _ = render(spec, cfg)
    b, _ = render(spec, cfg)
    assert np.array_equal(a.samples, b.samples)


# --- dataset -----------------------------------------------------------------


def test_synthesize_dataset_layout(tmp_path):
    bank = build_bank(make_sources(tmp_path))
    cfg = small_config()
    out = tmp_path / "out"
    manifest = synthesize_dataset(bank, cfg, out, seed=0)
    assert manifest["version"] == 1
    for split, count in zip(("train", "validation", "test"), (6, 2, 2)):
        wavs = sorted((out / split / "audio").glob("*.wav"))
        assert len(wavs) == count
        assert (out / split / "labels.tsv").exists()
        assert len(manifest["specs"][split]) == count
    sources = [set(manifest["split_sources"][s]) for s in ("train", "validation", "test")]
    assert not (sources[0] & sources[1] or sources[0] & sources[2] or sources[1] & sources[2])

    header = (out / "stats.tsv").read_text().splitlines()[0]
    assert header.split("\t") == ["class", "source files", "synthesized clips",
                                  "total events", "total duration(min)"]
    rows = (out / "stats.tsv").read_text().strip().splitlines()
    assert rows[-1].startswith("total\t")
    total = rows[-1].split("\t")
    assert total[1] == "10"  # 2 classes x 5 source files
    assert total[2] == "10"  # every clip has at least one event


def test_synthesize_dataset_collision_and_overwrite(tmp_path):
    bank = build_bank(make_sources(tmp_path))
    cfg = small_config(counts=(1, 1, 1))
    out = tmp_path / "out"
    synthesize_dataset(bank, cfg, out, seed=0)
    with pytest.raises(SceneError, match="overwrite"):
        synthesize_dataset(bank, cfg, out, seed=0)
    synthesize_dataset(bank, cfg, out, seed=0, overwrite=True)


def test_regeneration_from_manifest_is_bit_identical(tmp_path):
    bank = build_bank(make_sources(tmp_path))
    cfg = small_config(counts=(3, 1, 1))
    out = tmp_path / "out"
    synthesize_dataset(bank, cfg, out, seed=42)
    manifest = load_manifest(out / "manifest.json")
    cfg_back = SynthConfig.from_dict(manifest["config"])
    for entry in manifest["specs"]["train"]:
        spec = SynthSpec.from_dict(entry)
        wave, _ = render(spec, cfg_back)
        redone = tmp_path / "redone.wav"
        save_wav(wave, redone)
        assert redone.read_bytes() == (out / "train" / "audio" / spec.clip_id).read_bytes()


def test_stats_match_labels(tmp_path):
    bank = build_bank(make_sources(tmp_path))
    cfg = small_config()
    out = tmp_path / "out"
    manifest = synthesize_dataset(bank, cfg, out, seed=1)
    events = 0
    for split in ("train", "validation", "test"):
        for entry in manifest["specs"][split]:
            events += len(entry["placements"])
    total = (out / "stats.tsv").read_text().strip().splitlines()[-1].split("\t")
    assert int(total[3]) == events


def test_synthesized_split_loads_for_training(tmp_path):
    bank = build_bank(make_sources(tmp_path))
    cfg = small_config(counts=(2, 1, 1))
    out = tmp_path / "out"
    synthesize_dataset(bank, cfg, out, seed=2)
    split = load_split(out, "train", FrontendConfig(n_fft=512, n_mels=16))
    assert split.features.shape == (2, 250, 16)
    assert split.frame_period == 0.04
    assert split.targets.max() == 1.0
