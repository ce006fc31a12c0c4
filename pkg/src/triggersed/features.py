"""Frozen feature frontend: log-mel spectrogram, optional fixed random
projection, and the portable binary embedding format.

The frontend stands in for a pre-trained CNN backbone: it is deterministic,
never trained, and emits one D-dimensional embedding per 40 ms frame.
Externally computed embeddings can be imported through the `TSEDEMB1` file
format so the temporal models can run on real backbone features.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .timeline import DEFAULT_FRAME_PERIOD
from .audio import Waveform

LOG_FLOOR = 1e-5

EMBEDDING_MAGIC = b"TSEDEMB1"
EMBEDDING_VERSION = 1


class FeatureError(ValueError):
    """Invalid feature data or malformed embedding files."""


@dataclass(frozen=True)
class FeatureSequence:
    """A (T, D) sequence of frame embeddings at fixed frame period."""

    frames: np.ndarray
    frame_period: float = DEFAULT_FRAME_PERIOD
    source: str = "logmel"  # logmel | logmel+randproj | imported

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
            raise FeatureError(f"features must be (T>=1, D>=1), got shape {frames.shape}")
        if not np.isfinite(frames).all():
            raise FeatureError("features contain non-finite values")
        if self.frame_period <= 0:
            raise FeatureError(f"frame period must be positive, got {self.frame_period}")
        frames = frames.copy()
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class FrontendConfig:
    """Configuration of the frozen frontend.

    `hop` defaults to sample_rate * frame_period so that feature frames line
    up exactly with the label frame grid.
    """

    n_fft: int = 1024
    hop: int | None = None
    n_mels: int = 64
    projection_dim: int | None = None
    seed: int = 0
    frame_period: float = DEFAULT_FRAME_PERIOD

    def hop_for(self, sample_rate: int) -> int:
        if self.hop is not None:
            return self.hop
        hop = int(round(sample_rate * self.frame_period))
        if hop < 1:
            raise FeatureError(f"hop of {hop} samples at {sample_rate} Hz is invalid")
        return hop

    @property
    def output_dim(self) -> int:
        return self.projection_dim if self.projection_dim is not None else self.n_mels

    def to_dict(self) -> dict:
        return {
            "n_fft": self.n_fft,
            "hop": self.hop,
            "n_mels": self.n_mels,
            "projection_dim": self.projection_dim,
            "seed": self.seed,
            "frame_period": self.frame_period,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FrontendConfig":
        return cls(**d)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (np.power(10.0, np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int) -> np.ndarray:
    """HTK-style triangular filters (unit peak) from 0 Hz to Nyquist, shape
    (n_mels, n_fft // 2 + 1)."""
    nyquist = sample_rate / 2.0
    mel_points = np.linspace(0.0, float(hz_to_mel(nyquist)), n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    bins = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    fb = np.zeros((n_mels, len(bins)))
    for m in range(n_mels):
        lo, center, hi = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        rising = (bins - lo) / max(center - lo, 1e-12)
        falling = (hi - bins) / max(hi - center, 1e-12)
        fb[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


def logmel(w: Waveform, cfg: FrontendConfig, num_frames: int | None = None) -> FeatureSequence:
    """Log-mel features: magnitude STFT -> mel filterbank -> log(x + 1e-5).

    Produces floor(len / hop) frames (frame t starts at sample t * hop; the
    tail is zero-padded). When `num_frames` is given the output is clipped or
    padded (with the silence floor) to exactly that length.
    """
    hop = cfg.hop_for(w.sample_rate)
    if len(w.samples) < cfg.n_fft:
        raise FeatureError(
            f"waveform of {len(w.samples)} samples is shorter than n_fft={cfg.n_fft}"
        )
    n_frames = len(w.samples) // hop
    needed = (n_frames - 1) * hop + cfg.n_fft
    padded = np.zeros(needed)
    padded[: len(w.samples)] = w.samples[:needed] if needed < len(w.samples) else w.samples
    idx = np.arange(cfg.n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    window = np.hanning(cfg.n_fft)
    spectrum = np.abs(np.fft.rfft(padded[idx] * window, axis=1))
    fb = mel_filterbank(w.sample_rate, cfg.n_fft, cfg.n_mels)
    mel = spectrum @ fb.T
    frames = np.log(mel + LOG_FLOOR)
    if num_frames is not None:
        if n_frames >= num_frames:
            frames = frames[:num_frames]
        else:
            pad = np.full((num_frames - n_frames, cfg.n_mels), np.log(LOG_FLOOR))
            frames = np.vstack([frames, pad])
    return FeatureSequence(frames=frames, frame_period=hop / w.sample_rate, source="logmel")


def projection_matrix(cfg: FrontendConfig) -> np.ndarray:
    """Fixed random projection, regenerated deterministically from the seed."""
    if cfg.projection_dim is None:
        raise FeatureError("projection_dim is not set in the frontend config")
    rng = np.random.default_rng(cfg.seed)
    scale = 1.0 / np.sqrt(cfg.n_mels)
    return rng.uniform(-scale, scale, size=(cfg.projection_dim, cfg.n_mels))


def apply_frozen_projection(f: FeatureSequence, cfg: FrontendConfig) -> FeatureSequence:
    """Per-frame fixed linear map followed by tanh."""
    proj = projection_matrix(cfg)
    if f.feature_dim != proj.shape[1]:
        raise FeatureError(
            f"feature dim {f.feature_dim} does not match projection input {proj.shape[1]}"
        )
    out = np.tanh(f.frames @ proj.T)
    return FeatureSequence(frames=out, frame_period=f.frame_period, source="logmel+randproj")


def extract_features(w: Waveform, cfg: FrontendConfig, num_frames: int | None = None) -> FeatureSequence:
    """Full frontend: log-mel, then the frozen projection when configured."""
    feats = logmel(w, cfg, num_frames=num_frames)
    if cfg.projection_dim is not None:
        feats = apply_frozen_projection(feats, cfg)
    return feats


# --- binary embedding format -------------------------------------------------
#
# Little-endian layout:
#   magic "TSEDEMB1" (8) | u32 version | u32 T | u32 D | f32 frame_period
#   | T*D float32 row-major | u64 CRC64 of the float payload

_CRC64_POLY = 0xC96C5795D7870F42  # ECMA-182, reflected


def _crc64_tables() -> list[list[int]]:
    base = []
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ _CRC64_POLY if crc & 1 else crc >> 1
        base.append(crc)
    tables = [base]
    for k in range(1, 8):
        prev = tables[k - 1]
        tables.append([base[prev[i] & 0xFF] ^ (prev[i] >> 8) for i in range(256)])
    return tables


_CRC64_TABLES = _crc64_tables()


def _crc64_bytewise(data: bytes, crc: int) -> int:
    table = _CRC64_TABLES[0]
    for b in data:
        crc = table[(crc ^ b) & 0xFF] ^ (crc >> 8)
    return crc


def crc64(data: bytes) -> int:
    """CRC-64/XZ (ECMA-182 polynomial, reflected), slicing-by-8."""
    crc = 0xFFFFFFFFFFFFFFFF
    t0, t1, t2, t3, t4, t5, t6, t7 = _CRC64_TABLES
    n_words = len(data) // 8
    for off in range(0, n_words * 8, 8):
        crc ^= int.from_bytes(data[off : off + 8], "little")
        crc = (
            t7[crc & 0xFF]
            ^ t6[(crc >> 8) & 0xFF]
            ^ t5[(crc >> 16) & 0xFF]
            ^ t4[(crc >> 24) & 0xFF]
            ^ t3[(crc >> 32) & 0xFF]
            ^ t2[(crc >> 40) & 0xFF]
            ^ t1[(crc >> 48) & 0xFF]
            ^ t0[(crc >> 56) & 0xFF]
        )
    crc = _crc64_bytewise(data[n_words * 8 :], crc)
    return crc ^ 0xFFFFFFFFFFFFFFFF


def write_embeddings(f: FeatureSequence, path) -> None:
    payload = np.ascontiguousarray(f.frames, dtype="<f4").tobytes()
    header = EMBEDDING_MAGIC + struct.pack(
        "<IIIf", EMBEDDING_VERSION, f.num_frames, f.feature_dim, f.frame_period
    )
    Path(path).write_bytes(header + payload + struct.pack("<Q", crc64(payload)))


def read_embeddings(path) -> FeatureSequence:
    path = Path(path)
    blob = path.read_bytes()
    header_size = len(EMBEDDING_MAGIC) + struct.calcsize("<IIIf")
    if len(blob) < header_size:
        raise FeatureError(f"{path}: truncated header ({len(blob)} bytes)")
    if blob[:8] != EMBEDDING_MAGIC:
        raise FeatureError(f"{path}: bad magic {blob[:8]!r}, expected {EMBEDDING_MAGIC!r}")
    version, t, d, frame_period = struct.unpack("<IIIf", blob[8:header_size])
    if version != EMBEDDING_VERSION:
        raise FeatureError(f"{path}: unsupported version {version}, expected {EMBEDDING_VERSION}")
    if t < 1 or d < 1:
        raise FeatureError(f"{path}: invalid dimensions T={t}, D={d}")
    payload_size = t * d * 4
    expected = header_size + payload_size + 8
    if len(blob) < expected:
        raise FeatureError(
            f"{path}: truncated payload, need {expected} bytes for T={t} D={d}, got {len(blob)}"
        )
    payload = blob[header_size : header_size + payload_size]
    (stored_crc,) = struct.unpack("<Q", blob[header_size + payload_size : expected])
    actual_crc = crc64(payload)
    if stored_crc != actual_crc:
        raise FeatureError(f"{path}: CRC mismatch (stored {stored_crc:#x}, computed {actual_crc:#x})")
    frames = np.frombuffer(payload, dtype="<f4").reshape(t, d).astype(np.float64)
    return FeatureSequence(frames=frames, frame_period=float(frame_period), source="imported")
