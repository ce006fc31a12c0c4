"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    magic "TSEDCKP1" | u32 container_version
    u32 config_len   | config JSON (utf-8)
    u32 tensor_count
    per tensor:
        u16 name_len | name utf-8
        u16 dtype_len | numpy dtype string (e.g. "<f8")
        u8 ndim | u32 dim_0 ... dim_{ndim-1}
        raw C-order payload
    u64 CRC-64 over everything after the magic

Loading rebuilds the model from the config block and copies each stored
tensor into place only if its shape matches the rebuilt parameter, so a
checkpoint can never silently deform a model.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import crc64
from .models import ModuleConfig, Readout, TemporalModule, all_named_parameters

CHECKPOINT_MAGIC = b"TSEDCKP1"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed checkpoint file or mismatch against its own config."""


def write_container(path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    blob = bytearray()
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    config_bytes = json.dumps(config, sort_keys=True).encode("utf-8")
    blob += struct.pack("<I", len(config_bytes))
    blob += config_bytes
    blob += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        value = np.asarray(tensors[name])  # tobytes() already yields C order
        name_bytes = name.encode("utf-8")
        dtype_bytes = value.dtype.str.encode("ascii")
        blob += struct.pack("<H", len(name_bytes)) + name_bytes
        blob += struct.pack("<H", len(dtype_bytes)) + dtype_bytes
        blob += struct.pack("<B", value.ndim)
        for dim in value.shape:
            blob += struct.pack("<I", dim)
        blob += value.tobytes()
    payload = bytes(blob)
    Path(path).write_bytes(CHECKPOINT_MAGIC + payload + struct.pack("<Q", crc64(payload)))


class _Cursor:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < len(CHECKPOINT_MAGIC) + 12 or not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    payload, stored_crc = raw[len(CHECKPOINT_MAGIC):-8], raw[-8:]
    if crc64(payload) != struct.unpack("<Q", stored_crc)[0]:
        raise CheckpointError(f"{path}: CRC mismatch; file is corrupt")
    cur = _Cursor(payload, path)
    version = cur.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported container version {version}")
    config = json.loads(cur.take(cur.unpack("<I")).decode("utf-8"))
    tensors = {}
    for _ in range(cur.unpack("<I")):
        name = cur.take(cur.unpack("<H")).decode("utf-8")
        dtype = np.dtype(cur.take(cur.unpack("<H")).decode("ascii"))
        shape = tuple(cur.unpack("<I") for _ in range(cur.unpack("<B")))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = cur.take(count * dtype.itemsize)
        tensors[name] = np.frombuffer(data, dtype=dtype).reshape(shape).copy()
    if cur.pos != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - cur.pos} trailing bytes")
    return config, tensors


@dataclass
class Checkpoint:
    """A model plus the training state needed to reproduce its selection."""

    module: TemporalModule
    readout: Readout
    class_names: tuple[str, ...]
    epoch: int = 0
    val_psds1: float | None = None
    config_hash: str = ""
    moments: dict[str, np.ndarray] | None = None
    feature_norm: tuple[np.ndarray, np.ndarray] | None = None
    postproc: dict | None = None
    extra: dict | None = None

    def save(self, path) -> None:
        config = {
            "module": self.module.config.to_dict(),
            "class_names": list(self.class_names),
            "epoch": self.epoch,
            "val_psds1": self.val_psds1,
            "config_hash": self.config_hash,
            "postproc": self.postproc,
            "extra": self.extra or {},
        }
        tensors = {name: value for name, value, _ in
                   all_named_parameters(self.module, self.readout)}
        if self.moments:
            tensors.update({f"adam.{k}": v for k, v in self.moments.items()})
        if self.feature_norm is not None:
            tensors["norm.mean"] = self.feature_norm[0]
            tensors["norm.std"] = self.feature_norm[1]
        write_container(path, config, tensors)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        config, tensors = read_container(path)
        try:
            module_config = ModuleConfig.from_dict(config["module"])
            class_names = tuple(config["class_names"])
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"{path}: malformed config block: {exc}") from None
        module = TemporalModule(module_config)
        readout = Readout(module.exposed_dim, num_classes=len(class_names))
        for name, param, _ in all_named_parameters(module, readout):
            if name not in tensors:
                raise CheckpointError(f"{path}: missing tensor {name!r}")
            stored = tensors.pop(name)
            if stored.shape != param.shape:
                raise CheckpointError(
                    f"{path}: tensor {name!r} has shape {stored.shape}, "
                    f"config implies {param.shape}"
                )
            np.copyto(param, stored.astype(param.dtype))
        moments = {k[len("adam."):]: v for k, v in tensors.items() if k.startswith("adam.")}
        feature_norm = None
        if "norm.mean" in tensors and "norm.std" in tensors:
            feature_norm = (tensors["norm.mean"], tensors["norm.std"])
        return cls(
            module=module, readout=readout, class_names=class_names,
            epoch=config.get("epoch", 0), val_psds1=config.get("val_psds1"),
            config_hash=config.get("config_hash", ""),
            moments=moments or None, feature_norm=feature_norm,
            postproc=config.get("postproc"), extra=config.get("extra") or {},
        )
