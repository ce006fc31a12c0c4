"""Load a TorchScript frame-wise backbone and export WAV embeddings.

Model contract: a TorchScript module with float attributes/ints
``sample_rate``, ``embedding_dim``, ``frame_period`` whose forward maps a
``(1, n_samples)`` float32 waveform at ``sample_rate`` to ``(1, D, T)``
frame embeddings on a uniform ``frame_period`` grid. Any backbone exported
this way (e.g. a 40 ms frame-wise MobileNet) is usable; nothing here trains
or fine-tunes it.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.io import wavfile
from scipy.signal import resample_poly

from .tsedemb import write_embeddings

DEFAULT_FRAME_PERIOD = 0.040
MODEL_DIR_ENV = "BACKBONE_EXPORT_MODELS"


class ExportError(RuntimeError):
    """Model loading, contract, or inference failure."""


@dataclass(frozen=True)
class LoadedModel:
    module: torch.jit.ScriptModule
    model_id: str
    sample_rate: int
    dim: int
    frame_period: float


@dataclass(frozen=True)
class ExportJob:
    wavs: tuple
    out_dir: Path
    model_id: str
    frame_period: float = DEFAULT_FRAME_PERIOD
    dim: int | None = None  # None: accept whatever the model declares


def resolve_model_path(model_id: str, search_dir=None) -> Path:
    """A model id is a TorchScript file path, or a bare name looked up as
    <search dir>/<id>.pt (default dir from $BACKBONE_EXPORT_MODELS)."""
    direct = Path(model_id)
    if direct.is_file():
        return direct
    base = Path(search_dir or os.environ.get(MODEL_DIR_ENV, ""))
    candidate = base / f"{model_id}.pt"
    if search_dir or os.environ.get(MODEL_DIR_ENV):
        if candidate.is_file():
            return candidate
        raise ExportError(f"model {model_id!r} not found at {direct} or {candidate}")
    raise ExportError(f"model {model_id!r} not found (no such file; "
                      f"set ${MODEL_DIR_ENV} for bare ids)")


def load_model(model_id: str, search_dir=None) -> LoadedModel:
    path = resolve_model_path(model_id, search_dir)
    try:
        module = torch.jit.load(str(path), map_location="cpu")
    except Exception as exc:
        raise ExportError(f"cannot load TorchScript model {path}: {exc}") from exc
    module.eval()
    meta = {}
    for name in ("sample_rate", "embedding_dim", "frame_period"):
        if not hasattr(module, name):
            raise ExportError(f"model {path} lacks required attribute {name!r}")
        meta[name] = getattr(module, name)
    sr, dim = int(meta["sample_rate"]), int(meta["embedding_dim"])
    period = float(meta["frame_period"])
    if sr <= 0 or dim <= 0 or period <= 0:
        raise ExportError(f"model {path} declares invalid metadata "
                          f"sample_rate={sr} dim={dim} frame_period={period}")
    return LoadedModel(module, model_id, sr, dim, period)


def read_wav_mono(path) -> tuple[np.ndarray, int]:
    """Any PCM or IEEE-float WAV as float32 mono in [-1, 1]."""
    try:
        sr, data = wavfile.read(path)
    except Exception as exc:
        raise ExportError(f"cannot read {path}: {exc}") from exc
    if data.ndim == 2:
        data = data.mean(axis=1)
    if np.issubdtype(data.dtype, np.integer):
        info = np.iinfo(data.dtype)
        scale = float(max(abs(info.min), info.max))
        data = data.astype(np.float32) / scale
    else:
        data = data.astype(np.float32)
    return data, int(sr)


def embed_waveform(model: LoadedModel, samples: np.ndarray, sr: int) -> np.ndarray:
    """(T, D) float32 embeddings for one waveform; resamples if needed."""
    if samples.size == 0:
        raise ExportError("empty waveform")
    if sr != model.sample_rate:
        g = math.gcd(model.sample_rate, sr)
        samples = resample_poly(samples.astype(np.float64),
                                model.sample_rate // g, sr // g).astype(np.float32)
    with torch.no_grad():
        out = model.module(torch.from_numpy(samples[None, :]))
    if out.ndim != 3 or out.shape[0] != 1:
        raise ExportError(f"model output shape {tuple(out.shape)}; expected (1, D, T)")
    if out.shape[1] != model.dim:
        raise ExportError(f"model produced dim {out.shape[1]}, declared {model.dim}")
    return out[0].T.contiguous().numpy().astype(np.float32)


@dataclass
class Manifest:
    model: str
    dim: int
    frame_period: float
    files: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"model": self.model, "dim": self.dim,
                "frame_period": self.frame_period, "files": self.files}

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def export(job: ExportJob, model: LoadedModel | None = None) -> Manifest:
    """Run the backbone over every wav and write one TSEDEMB1 file per wav
    plus ``manifest.json``. Aborts before writing anything if the model does
    not match the job's expected frame period or embedding dim."""
    if model is None:
        model = load_model(job.model_id)
    if abs(model.frame_period - job.frame_period) > 1e-6:
        raise ExportError(f"model frame period {model.frame_period} != "
                          f"expected {job.frame_period}")
    if job.dim is not None and model.dim != job.dim:
        raise ExportError(f"model embedding dim is {model.dim}, expected {job.dim}")

    out = Path(job.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(model.model_id, model.dim, model.frame_period)
    stems = {}
    for wav in job.wavs:
        wav = Path(wav)
        if wav.stem in stems:
            raise ExportError(f"duplicate wav stem {wav.stem!r}: "
                              f"{stems[wav.stem]} and {wav}")
        stems[wav.stem] = wav
        samples, sr = read_wav_mono(wav)
        frames = embed_waveform(model, samples, sr)
        expected_t = int(round(len(samples) / sr / model.frame_period))
        if frames.shape[0] < expected_t:
            raise ExportError(f"{wav}: model produced {frames.shape[0]} frames, "
                              f"expected {expected_t}")
        frames = frames[:expected_t]  # conv padding can overshoot by a frame
        name = wav.stem + ".emb"
        write_embeddings(frames, model.frame_period, out / name)
        manifest.files[str(wav)] = {"embedding": name, "dim": model.dim,
                                    "frames": int(frames.shape[0])}
    manifest.write(out / "manifest.json")
    return manifest
