import hashlib

import numpy as np
import pytest

from triggersed.audio import Waveform
from triggersed.features import (
    LOG_FLOOR,
    FeatureError,
    FeatureSequence,
    FrontendConfig,
    apply_frozen_projection,
    crc64,
    _crc64_bytewise,
    extract_features,
    logmel,
    mel_filterbank,
    mel_to_hz,
    projection_matrix,
    read_embeddings,
    write_embeddings,
)


def test_ten_second_clip_yields_250_frames():
    w = Waveform(np.zeros(160000), 16000)
    feats = logmel(w, FrontendConfig())
    assert feats.num_frames == 250
    assert feats.frame_period == pytest.approx(0.040)


def test_silence_hits_log_floor_everywhere():
    w = Waveform(np.zeros(160000), 16000)
    feats = logmel(w, FrontendConfig())
    assert np.allclose(feats.frames, np.log(LOG_FLOOR))


def test_tone_concentrates_in_expected_mel_band():
    # band peaking nearest 1 kHz, derived from the triangle responses directly
    cfg = FrontendConfig()
    sr = 16000
    centers = mel_to_hz(np.linspace(0, 2595 * np.log10(1 + sr / 2 / 700), cfg.n_mels + 2))[1:-1]
    fb = mel_filterbank(sr, cfg.n_fft, cfg.n_mels)
    bin_1k = int(round(1000 * cfg.n_fft / sr))
    expected_band = int(np.argmax(fb[:, bin_1k]))
    assert abs(centers[expected_band] - 1000) < 70

    t = np.arange(160000) / sr
    w = Waveform(0.5 * np.sin(2 * np.pi * 1000 * t), sr)
    feats = logmel(w, cfg)
    argmax_bands = np.argmax(feats.frames, axis=1)
    assert np.all(argmax_bands == expected_band)


def test_doubling_amplitude_bounded_log_increase():
    rng = np.random.default_rng(5)
    x = rng.uniform(-0.4, 0.4, 64000)
    cfg = FrontendConfig()
    f1 = logmel(Waveform(x, 16000), cfg)
    f2 = logmel(Waveform(2 * x, 16000), cfg)
    diff = f2.frames - f1.frames
    assert diff.min() >= -1e-12
    assert diff.max() <= np.log(4) + 1e-9


def test_too_short_input_rejected():
    with pytest.raises(FeatureError, match="n_fft"):
        logmel(Waveform(np.zeros(512), 16000), FrontendConfig(n_fft=1024))


def test_frame_count_clipped_or_padded_to_grid():
    cfg = FrontendConfig()
    w_long = Waveform(np.zeros(161000), 16000)
    assert logmel(w_long, cfg, num_frames=250).num_frames == 250
    w_short = Waveform(np.zeros(150000), 16000)
    padded = logmel(w_short, cfg, num_frames=250)
    assert padded.num_frames == 250
    assert np.allclose(padded.frames[-1], np.log(LOG_FLOOR))


def test_projection_zero_in_zero_out_and_determinism():
    cfg = FrontendConfig(projection_dim=32, seed=9)
    f = FeatureSequence(np.zeros((5, 64)), 0.04)
    out = apply_frozen_projection(f, cfg)
    assert np.all(out.frames == 0.0)
    assert out.source == "logmel+randproj"

    rng = np.random.default_rng(1)
    f2 = FeatureSequence(rng.normal(size=(7, 64)), 0.04)
    a = apply_frozen_projection(f2, cfg)
    b = apply_frozen_projection(f2, cfg)
    assert np.array_equal(a.frames, b.frames)
    c = apply_frozen_projection(f2, FrontendConfig(projection_dim=32, seed=10))
    assert not np.array_equal(a.frames, c.frames)


def test_projection_matrix_hash_stable():
    cfg = FrontendConfig(projection_dim=16, seed=3)
    h1 = hashlib.sha256(projection_matrix(cfg).tobytes()).hexdigest()
    h2 = hashlib.sha256(projection_matrix(cfg).tobytes()).hexdigest()
    assert h1 == h2
    bounds = np.abs(projection_matrix(cfg)).max()
    assert bounds <= 1 / np.sqrt(cfg.n_mels)


def test_frontend_determinism_end_to_end():
    rng = np.random.default_rng(4)
    x = rng.uniform(-0.3, 0.3, 160000)
    cfg = FrontendConfig(projection_dim=48, seed=2)
    a = extract_features(Waveform(x, 16000), cfg)
    b = extract_features(Waveform(x.copy(), 16000), cfg)
    assert np.array_equal(a.frames, b.frames)
    assert a.feature_dim == 48


def test_crc64_known_vector_and_slicing_agreement():
    # CRC-64/XZ check value
    assert crc64(b"123456789") == 0x995DC9BBDF1939FA
    rng = np.random.default_rng(6)
    for n in [0, 1, 7, 8, 9, 63, 64, 65, 1000]:
        data = rng.integers(0, 256, n, dtype=np.uint8).tobytes()
        slow = _crc64_bytewise(data, 0xFFFFFFFFFFFFFFFF) ^ 0xFFFFFFFFFFFFFFFF
        assert crc64(data) == slow


def test_embedding_roundtrip_bit_identical(tmp_path):
    rng = np.random.default_rng(8)
    frames = rng.normal(size=(250, 960)).astype(np.float32).astype(np.float64)
    f = FeatureSequence(frames, 0.040, source="imported")
    p = tmp_path / "clip.emb"
    write_embeddings(f, p)
    back = read_embeddings(p)
    assert np.array_equal(back.frames, frames)
    assert back.frame_period == pytest.approx(0.040)
    assert back.source == "imported"


def test_embedding_rejects_zero_frames_and_truncation(tmp_path):
    rng = np.random.default_rng(9)
    f = FeatureSequence(rng.normal(size=(4, 8)).astype(np.float32), 0.040)
    p = tmp_path / "x.emb"
    write_embeddings(f, p)

    blob = p.read_bytes()
    truncated = tmp_path / "trunc.emb"
    truncated.write_bytes(blob[:-12])
    with pytest.raises(FeatureError, match="truncated"):
        read_embeddings(truncated)

    zero_t = tmp_path / "zero.emb"
    zero_t.write_bytes(blob[:8] + (1).to_bytes(4, "little") + (0).to_bytes(4, "little") + blob[16:])
    with pytest.raises(FeatureError, match="T=0"):
        read_embeddings(zero_t)

    bad_magic = tmp_path / "magic.emb"
    bad_magic.write_bytes(b"NOTMAGIC" + blob[8:])
    with pytest.raises(FeatureError, match="magic"):
        read_embeddings(bad_magic)

    corrupted = tmp_path / "crc.emb"
    body = bytearray(blob)
    body[30] ^= 0xFF
    corrupted.write_bytes(bytes(body))
    with pytest.raises(FeatureError, match="CRC"):
        read_embeddings(corrupted)
