"""Acceptance gate: the package-level requirements checked in one place.

Each test covers one requirement and fails with the measured numbers in the
message. The desk-scale ordering and few-shot tests share one synthesized
three-class dataset of amplitude-modulated tones planted among steady hums
that reuse the same carrier bands and levels, so a frame-local model cannot
tell events from background and temporal modeling has to earn its score.
Those two tests dominate the runtime (tens of minutes).
"""

import statistics

import numpy as np
import pytest

from triggersed import models
from triggersed.audio import Waveform, load_wav, save_wav
from triggersed.data import (
    SPLIT_NAMES,
    DatasetSplit,
    apply_feature_norm,
    discover_classes,
    feature_stats,
    load_split,
)
from triggersed.features import FrontendConfig
from triggersed.fewshot import AdaptConfig, FewShotProtocol, run_protocol
from triggersed.hpo import esn_search_space, run_study
from triggersed.metrics import PsdsConfig, MatchConfig, event_f1, psds, segment_f1
from triggersed.models import (
    EsnParams,
    ModuleConfig,
    Readout,
    TemporalModule,
    count_trainable,
)
from triggersed.postproc import tune
from triggersed.scenegen import (
    SynthConfig,
    SynthSpec,
    build_bank,
    load_manifest,
    render,
    synthesize_dataset,
)
from triggersed.timeline import ClipAnnotation, Event, read_strong_tsv, write_strong_tsv
from triggersed.training import TrainConfig, fit, predict_posteriors

from test_metrics import (
    aligned_posteriors,
    clip,
    oracle_event_counts,
    oracle_f1,
    oracle_psds,
    oracle_segment_counts,
    random_events,
    random_instance,
    warnings_or_not,
)
from test_models import eval_loss, tiny_module

# --- 1. parameter counts ------------------------------------------------------

PUBLISHED_COUNTS = {
    ("linear", "uni"): 6_727,
    ("gru", "uni"): 1_037_319,
    ("gru", "bi"): 2_221_831,
    ("lstm", "uni"): 1_300_487,
    ("lstm", "bi"): 2_879_239,
    ("esn", "uni"): 7_175,
    ("esn", "bi"): 14_343,
}


def test_parameter_counts_reconcile_published_table():
    for (kind, direction), expected in sorted(PUBLISHED_COUNTS.items()):
        hidden = 1024 if kind == "esn" else 256
        config = ModuleConfig.for_kind(kind, direction=direction, input_dim=960,
                                       hidden=hidden, layers=2, input_proj=256,
                                       seed=0)
        module = TemporalModule(config)
        readout = Readout(module.exposed_dim, num_classes=7, seed=1)
        got = count_trainable(module, readout)
        assert got == expected, f"{kind}/{direction}: {got} != {expected}"


# --- 2. gradient correctness --------------------------------------------------


def test_gradients_match_finite_differences_within_1e4():
    rng = np.random.default_rng(17)
    T = 6
    for kind in ("linear", "gru", "lstm", "esn"):
        for direction in ("uni", "bi"):
            module, readout = tiny_module(kind, direction)
            x = 0.8 * rng.standard_normal((2, T, 5))
            y = rng.integers(0, 2, (2, T, 2)).astype(np.float64)
            _, analytic = models.backward(module, readout, x, y)
            eps = 1e-4
            worst = 0.0
            for name, arr, trainable in models.all_named_parameters(module, readout):
                if not trainable:
                    continue
                numeric = np.zeros_like(arr)
                it = np.nditer(arr, flags=["multi_index"])
                for _ in it:
                    idx = it.multi_index
                    orig = arr[idx]
                    arr[idx] = orig + eps
                    lp = eval_loss(module, readout, x, y)
                    arr[idx] = orig - eps
                    lm = eval_loss(module, readout, x, y)
                    arr[idx] = orig
                    numeric[idx] = (lp - lm) / (2 * eps)
                scale = max(np.abs(analytic[name]).max(), np.abs(numeric).max(), 1e-8)
                worst = max(worst, np.abs(analytic[name] - numeric).max() / scale)
            assert worst <= 1e-4, f"{kind}/{direction}: max rel err {worst:.3e}"


# --- 3. echo state property ---------------------------------------------------


def test_echo_state_property_final_gap_below_1e6():
    config = ModuleConfig.for_kind(
        "esn", input_dim=16, hidden=256,
        esn=EsnParams(spectral_radius=0.9, leak=0.5, input_scale=1.0,
                      density=0.1, seed=23),
    )
    layer = TemporalModule(config).blocks[0].fwd
    rng = np.random.default_rng(4)
    s_a = rng.uniform(-1.0, 1.0, 256)
    s_b = rng.uniform(-1.0, 1.0, 256)
    for _ in range(500):
        z = rng.uniform(-1.0, 1.0, 16)
        s_a, _, _ = layer.step(s_a, z)
        s_b, _, _ = layer.step(s_b, z)
    gap = np.abs(s_a - s_b).max()
    assert gap < 1e-6, f"state gap after 500 shared steps: {gap:.3e}"


# --- 4. metrics vs brute-force oracles ----------------------------------------


def test_metrics_match_bruteforce_oracles_within_1e9():
    rng = np.random.default_rng(90210)
    for trial in range(200):
        refs, posteriors, classes, cfg, window = random_instance(rng)
        if all(len(a.events) == 0 for a in refs):
            continue
        with warnings_or_not():
            value = psds(refs, posteriors, classes, postproc_window=window,
                         config=cfg).value
        expected = oracle_psds(refs, posteriors, classes, window, cfg)
        assert abs(value - expected) <= 1e-9, f"psds trial {trial}"

        duration = refs[0].duration
        preds = [ClipAnnotation(a.clip_id, duration,
                                random_events(rng, classes, duration))
                 for a in refs]
        match = MatchConfig(offset_rule=str(rng.choice(["strict_collar",
                                                        "collar_or_20pct"])))
        seg = segment_f1(refs, preds, match, class_names=classes)
        counts = {c: tuple(np.sum([oracle_segment_counts(r.events_of(c),
                                                         p.events_of(c),
                                                         duration, 1.0)
                                   for r, p in zip(refs, preds)], axis=0))
                  for c in classes}
        _, macro = oracle_f1(counts)
        assert abs(seg.macro - macro) <= 1e-9, f"segment trial {trial}"

        ev = event_f1(refs, preds, match, class_names=classes)
        counts = {c: tuple(np.sum([oracle_event_counts(r.events_of(c),
                                                       p.events_of(c),
                                                       match.collar,
                                                       match.offset_rule)
                                   for r, p in zip(refs, preds)], axis=0))
                  for c in classes}
        _, macro = oracle_f1(counts)
        assert abs(ev.macro - macro) <= 1e-9, f"event trial {trial}"


# --- 5. boundary values -------------------------------------------------------


def test_metric_boundary_values_exact():
    classes = ("cat", "dog")
    refs = [clip("a", 10.0, [("dog", 1.0, 2.5), ("cat", 4.0, 6.0)]),
            clip("b", 10.0, [("dog", 7.0, 9.0), ("cat", 0.5, 1.5)])]

    assert segment_f1(refs, refs, class_names=classes).macro == 1.0
    assert event_f1(refs, refs, class_names=classes).macro == 1.0
    oracle = {a.clip_id: aligned_posteriors(a, classes) for a in refs}
    assert psds(refs, oracle, classes).value == 1.0

    empty = [ClipAnnotation(a.clip_id, a.duration, ()) for a in refs]
    assert segment_f1(refs, empty, class_names=classes).macro == 0.0
    assert event_f1(refs, empty, class_names=classes).macro == 0.0
    silent = {a.clip_id: np.full((250, 2), 1e-4) for a in refs}
    assert psds(refs, silent, classes).value == 0.0


# --- 6/9. desk-scale dataset (shared fixture) ---------------------------------

DESK_SR = 8000
DESK_FRONTEND = FrontendConfig(n_fft=256, n_mels=32)
AM_RATES = {"am2": 2.5, "am5": 5.0, "am10": 10.0}
CLASS_CARRIERS = {"am2": (340.0, 350.0, 360.0, 370.0, 380.0),
                  "am5": (570.0, 585.0, 600.0, 615.0, 630.0),
                  "am10": (950.0, 975.0, 1000.0, 1025.0, 1050.0)}
# One hum bank per carrier band: the 3/1/1 source split then puts in-band
# hums in every split for every class (a single mixed bank can leave a
# band hum-free at test time), and three hum banks out of six make half of
# all placements steady distractors.
HUM_CARRIERS = {"hum_lo": (342.0, 352.0, 361.0, 371.0, 379.0),
                "hum_mid": (572.0, 587.0, 602.0, 617.0, 629.0),
                "hum_hi": (955.0, 978.0, 1002.0, 1026.0, 1048.0)}


def _am_tone(carrier, rate, phase, dur, depth=0.9):
    """Tone whose carrier band names the class and whose amplitude modulation
    marks it as an event. Steady hums in the same bands are the distractors, so
    frame-level spectra alone cannot separate events from background."""
    t = np.arange(int(round(dur * DESK_SR))) / DESK_SR
    env = 1.0 + depth * np.sin(2.0 * np.pi * rate * t + phase)
    return Waveform(0.3 * env * np.sin(2.0 * np.pi * carrier * t), DESK_SR)


def build_desk_bank(bank_dir, seed=0):
    rng = np.random.default_rng(seed)
    for label, rate in AM_RATES.items():
        d = bank_dir / "foreground" / label
        d.mkdir(parents=True)
        for i, carrier in enumerate(CLASS_CARRIERS[label]):
            phase = float(rng.uniform(0.0, 2.0 * np.pi))
            save_wav(_am_tone(carrier, rate, phase, 4.5), d / f"src{i}.wav")
    for label, carriers in HUM_CARRIERS.items():
        d = bank_dir / "foreground" / label
        d.mkdir()
        for i, carrier in enumerate(carriers):
            save_wav(_am_tone(carrier, 0.0, 0.0, 4.5, depth=0.0),
                     d / f"src{i}.wav")
    bg = bank_dir / "background"
    bg.mkdir()
    for i in range(5):
        save_wav(Waveform(0.1 * rng.standard_normal(12 * DESK_SR), DESK_SR),
                 bg / f"bg{i}.wav")


def desk_synth_config(counts):
    return SynthConfig(clip_duration=10.0, events_per_clip=(1, 3),
                       snr_db=(10.0, 30.0), counts=counts, sample_rate=DESK_SR,
                       event_duration=(1.0, 2.6), pitch_semitones=(-1.0, 1.0))


def build_desk_dataset(root, counts=(600, 200, 200), seed=0):
    """Synthesize, extract log-mel features, and normalize by train stats.

    Hum placements are scrubbed from the labels after synthesis: they share
    the event classes' carrier bands, levels, and durations but are steady,
    leaving amplitude modulation as the only cue that an event is present."""
    bank_dir = root / "bank"
    build_desk_bank(bank_dir)
    out = root / "dataset"
    synthesize_dataset(build_bank(bank_dir), desk_synth_config(counts), out,
                       seed=seed)
    for split in SPLIT_NAMES:
        tsv = out / split / "labels.tsv"
        kept = [ClipAnnotation(a.clip_id, a.duration,
                               [ev for ev in a.events
                                if ev.label not in HUM_CARRIERS])
                for a in read_strong_tsv(tsv)]
        write_strong_tsv(kept, tsv)
    classes = discover_classes(out)
    splits = {s: load_split(out, s, DESK_FRONTEND, class_names=classes)
              for s in SPLIT_NAMES}
    stats = feature_stats(splits["train"].features)
    for split in splits.values():
        split.features = apply_feature_norm(split.features, stats)
    return splits


def desk_model(kind, direction, input_dim, num_classes, seed):
    # Reservoir dynamics picked by a pilot sweep on this task. The low input
    # scale keeps the reservoir near its linear regime, where its modes act
    # as damped resonators: amplitude modulation survives in the states
    # instead of being clipped away by tanh saturation.
    esn = EsnParams(spectral_radius=0.9, leak=0.3, input_scale=0.1,
                    density=0.1, seed=seed + 50)
    hidden = 256 if kind == "esn" else 64
    config = ModuleConfig.for_kind(kind, direction=direction,
                                   input_dim=input_dim, hidden=hidden,
                                   layers=1, input_proj=64, dropout_p=0.0,
                                   esn=esn, seed=seed)
    module = TemporalModule(config)
    return module, Readout(module.exposed_dim, num_classes, seed=seed + 1)


def fit_and_test_psds(kind, direction, splits, seed, epochs=40):
    """Train one variant and return its full-sweep PSDS1 on the test split.

    Selection runs on the full threshold sweep: the default single-point
    selection sees nothing until posteriors cross 0.5, which takes far
    longer than this training budget on an imbalanced frame grid.
    """
    train, val, test = splits["train"], splits["validation"], splits["test"]
    module, readout = desk_model(kind, direction, train.features.shape[-1],
                                 len(train.class_names), seed)
    if kind == "esn":
        # Only the readout trains, so it gets the classic ridge-style recipe:
        # small batches, weight decay, twice the epochs, and a selection
        # burn-in so an early validation spike cannot preempt the converged
        # readout. Selection smoothing matches the deployment windows below.
        cfg = TrainConfig(learning_rate=3e-3, batch_size=16,
                          max_epochs=2 * epochs, early_stop_patience=2 * epochs,
                          seed=seed, weight_decay=1e-2)
        burn_in, sel_window = epochs // 2, 41
    else:
        lr = 1e-2 if kind == "linear" else 5e-3
        cfg = TrainConfig(learning_rate=lr, batch_size=32, max_epochs=epochs,
                          early_stop_patience=epochs, seed=seed)
        burn_in, sel_window = 0, 21
    fit(module, readout, train, val, cfg, selection_config=PsdsConfig(),
        selection_window=sel_window, selection_burn_in=burn_in)
    val_post = predict_posteriors(module, readout, val.features)
    tuned = tune(val.refs, val.posteriors_as_dict(val_post), val.class_names,
                 objective="psds1", frame_period=val.frame_period,
                 windows=(1, 5, 9, 13, 17, 21, 25, 29, 33, 41, 49, 57, 65))
    window = tuned.config.windows(len(val.class_names))
    posteriors = predict_posteriors(module, readout, test.features)
    return psds(test.refs, test.posteriors_as_dict(posteriors),
                test.class_names, postproc_window=window,
                frame_period=test.frame_period).value


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    return build_desk_dataset(tmp_path_factory.mktemp("desk"))


TREND_VARIANTS = (("linear", "uni"), ("gru", "uni"), ("gru", "bi"),
                  ("lstm", "uni"), ("lstm", "bi"), ("esn", "uni"), ("esn", "bi"))
TREND_SEEDS = (0, 1, 2)
TREND_MARGIN = 0.01


def test_desk_scale_psds_ordering(desk):
    medians = {}
    for kind, direction in TREND_VARIANTS:
        scores = [fit_and_test_psds(kind, direction, desk, seed)
                  for seed in TREND_SEEDS]
        medians[(kind, direction)] = statistics.median(scores)
    table = ", ".join(f"{k}/{d}={v:.3f}" for (k, d), v in medians.items())
    print(f"desk-scale median test PSDS1 over {len(TREND_SEEDS)} seeds: {table}")

    linear = medians[("linear", "uni")]
    for kind in ("gru", "lstm", "esn"):
        uni, bi = medians[(kind, "uni")], medians[(kind, "bi")]
        assert bi >= uni + TREND_MARGIN, \
            f"bi{kind} {bi:.3f} not >= uni {uni:.3f} + {TREND_MARGIN} ({table})"
        for direction in ("uni", "bi"):
            score = medians[(kind, direction)]
            assert score >= linear + TREND_MARGIN, \
                f"{kind}/{direction} {score:.3f} not >= linear {linear:.3f} " \
                f"+ {TREND_MARGIN} ({table})"


# --- 7. tuning never hurts ----------------------------------------------------


def test_postproc_tuning_never_hurts_validation_objective():
    rng = np.random.default_rng(123)
    classes = ("a", "b")
    for run in range(4):
        refs, posteriors = [], {}
        for i in range(3):
            events = random_events(rng, classes, 4.0)
            refs.append(ClipAnnotation(f"c{i}", 4.0, events))
            posteriors[f"c{i}"] = rng.uniform(0.01, 0.99, (100, 2))
        if all(len(a.events) == 0 for a in refs):
            continue
        for objective in ("psds1", "event_f1"):
            with warnings_or_not():
                result = tune(refs, posteriors, classes, objective=objective)
            assert result.objective_value >= result.default_value, \
                f"run {run} {objective}: tuned {result.objective_value:.4f} " \
                f"< default {result.default_value:.4f}"


# --- 8. synthesis determinism and split hygiene -------------------------------


def test_synthesis_bit_identical_and_splits_disjoint(tmp_path):
    bank_dir = tmp_path / "bank"
    build_desk_bank(bank_dir)
    bank = build_bank(bank_dir)

    by_split = {s: {p for p, sp in bank.assignment().items() if sp == s}
                for s in SPLIT_NAMES}
    for a in SPLIT_NAMES:
        for b in SPLIT_NAMES:
            if a != b:
                assert not (by_split[a] & by_split[b])

    cfg = desk_synth_config((6, 2, 2))
    synthesize_dataset(bank, cfg, tmp_path / "d1", seed=5)
    synthesize_dataset(bank, cfg, tmp_path / "d2", seed=5)
    manifest = load_manifest(tmp_path / "d1" / "manifest.json")
    rebuilt_cfg = SynthConfig.from_dict(manifest["config"])
    for split in SPLIT_NAMES:
        for spec_dict in manifest["specs"][split]:
            spec = SynthSpec.from_dict(spec_dict)
            original = tmp_path / "d1" / split / "audio" / spec.clip_id
            twin = tmp_path / "d2" / split / "audio" / spec.clip_id
            assert original.read_bytes() == twin.read_bytes()
            wave, _ = render(spec, rebuilt_cfg)
            regen = tmp_path / "regen.wav"
            save_wav(wave, regen)
            assert regen.read_bytes() == original.read_bytes(), spec.clip_id


# --- 9. few-shot bookkeeping --------------------------------------------------

FEWSHOT_TARGET = "am5"
FEWSHOT_QUERY_CLIPS = 80


def _first_clips_with(split, label, count):
    ids = [cid for cid, ann in zip(split.clip_ids, split.refs)
           if any(e.label == label for e in ann.events)]
    assert len(ids) >= count
    return tuple(ids[:count])


def _head(split, count):
    return DatasetSplit(name=split.name, clip_ids=split.clip_ids[:count],
                        features=split.features[:count],
                        targets=split.targets[:count], refs=split.refs[:count],
                        class_names=split.class_names,
                        frame_period=split.frame_period)


def test_fewshot_bookkeeping_and_reproducibility(desk):
    support = desk["train"]
    query = _head(desk["test"], FEWSHOT_QUERY_CLIPS)
    pool = _first_clips_with(support, FEWSHOT_TARGET, 8)
    protocol = FewShotProtocol(support_pool=pool, target_class=FEWSHOT_TARGET,
                               k_values=(1, 2, 3, 4, 5), seeds=tuple(range(10)))
    cfg = AdaptConfig(epochs=25, learning_rate=1e-3, gru_hidden=64,
                      gru_proj=32, gru_layers=1, reservoir=256)
    result = run_protocol(protocol, support, query, cfg=cfg)

    assert len(result.rows) == 100
    for model in ("bigru", "biesn"):
        rows = [r for r in result.rows if r["model"] == model]
        assert len(rows) == 50, f"{model}: {len(rows)} rows"
        assert all(0.0 <= r["psds1"] <= 1.0 for r in rows)

    slice_protocol = FewShotProtocol(support_pool=pool,
                                     target_class=FEWSHOT_TARGET,
                                     k_values=(1,), seeds=tuple(range(10)))
    again = run_protocol(slice_protocol, support, query, cfg=cfg)
    expected = [r for r in result.rows if r["K"] == 1]
    assert again.rows == expected, "K=1 rerun did not reproduce bit-exactly"

    # soft criterion, reported not gated
    wins = 0
    for k in (1, 2, 3, 4, 5):
        esn_std = np.std(result.values("biesn", k))
        gru_std = np.std(result.values("bigru", k))
        wins += esn_std <= gru_std
    print(f"soft check: biesn run-to-run std <= bigru std for {wins}/5 K values"
          f" ({'meets' if wins >= 3 else 'misses'} the >=3 target)")


# --- 10. HPO sanity -----------------------------------------------------------


def test_random_sampler_bounds_and_tpe_convergence():
    space = esn_search_space()
    rng = np.random.default_rng(8)
    for _ in range(10_000):
        space.validate(space.sample_random(rng))

    best, history = run_study(
        space, lambda c: -((c["spectral_radius"] - 1.0) ** 2),
        budget=150, sampler="tpe", seed=0)
    assert len(history) == 150
    gap = abs(best.config["spectral_radius"] - 1.0)
    assert gap <= 0.1, f"TPE best rho {best.config['spectral_radius']:.3f}"
