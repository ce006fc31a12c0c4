"""Waveform container and WAV file I/O.

Audio is mono float64 internally; multi-channel files are mixed down by
averaging. 16-bit PCM and 32-bit float WAV are supported for reading and
writing.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

DEFAULT_SAMPLE_RATE = 16000


class AudioError(ValueError):
    """Unreadable or unsupported audio data."""


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray  # mono, float64
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise AudioError(f"sample rate must be positive, got {self.sample_rate}")
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise AudioError(f"waveform must be mono 1-D, got shape {samples.shape}")
        if not np.isfinite(samples).all():
            raise AudioError("waveform contains non-finite samples")
        samples = samples.copy()
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def rms(self) -> float:
        if len(self.samples) == 0:
            return 0.0
        return float(np.sqrt(np.mean(np.square(self.samples))))


def load_wav(path) -> Waveform:
    """Load a PCM or float WAV file, mixing channels down to mono in [-1, 1]."""
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise AudioError(f"cannot read WAV file {path}: {exc}") from exc
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise AudioError(f"unsupported WAV sample format {data.dtype} in {path}")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    return Waveform(samples=samples, sample_rate=int(rate))


def save_wav(w: Waveform, path, fmt: str = "float32") -> None:
    """Write a mono WAV file as 32-bit float (default) or 16-bit PCM."""
    path = Path(path)
    if fmt == "float32":
        wavfile.write(path, w.sample_rate, w.samples.astype(np.float32))
    elif fmt == "int16":
        quantized = np.clip(np.round(w.samples * 32768.0), -32768, 32767)
        wavfile.write(path, w.sample_rate, quantized.astype(np.int16))
    else:
        raise AudioError(f"unsupported output format {fmt!r}; use 'float32' or 'int16'")


def wav_duration(path) -> float:
    """Clip length in seconds, reading only the RIFF header chunks."""
    path = Path(path)
    with path.open("rb") as fh:
        riff = fh.read(12)
        if len(riff) < 12 or riff[:4] != b"RIFF" or riff[8:12] != b"WAVE":
            raise AudioError(f"{path} is not a RIFF/WAVE file")
        sample_rate = None
        block_align = None
        data_size = None
        while True:
            header = fh.read(8)
            if len(header) < 8:
                break
            chunk_id = header[:4]
            size = int.from_bytes(header[4:8], "little")
            if chunk_id == b"fmt ":
                fmt = fh.read(size)
                sample_rate = int.from_bytes(fmt[4:8], "little")
                block_align = int.from_bytes(fmt[12:14], "little")
            elif chunk_id == b"data":
                data_size = size
                fh.seek(size + (size & 1), 1)
            else:
                fh.seek(size + (size & 1), 1)
        if not sample_rate or not block_align or data_size is None:
            raise AudioError(f"{path}: missing fmt or data chunk")
        return (data_size // block_align) / sample_rate
