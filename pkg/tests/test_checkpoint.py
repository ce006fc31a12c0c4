"""Checkpoint container: byte-level format, integrity, model roundtrip."""

import struct

import numpy as np
import pytest

from triggersed.checkpoint import (
    CHECKPOINT_MAGIC,
    Checkpoint,
    CheckpointError,
    read_container,
    write_container,
)
from triggersed.features import crc64
from triggersed.models import (
    EsnParams,
    ModuleConfig,
    Readout,
    TemporalModule,
    all_named_parameters,
    config_hash,
)


def sample_tensors():
    rng = np.random.default_rng(0)
    return {
        "alpha": rng.standard_normal((3, 4)),
        "beta": np.arange(5, dtype=np.int64),
        "gamma": np.array(2.5),
    }


def test_container_roundtrip(tmp_path):
    path = tmp_path / "state.ckpt"
    config = {"kind": "gru", "nested": {"a": [1, 2]}}
    tensors = sample_tensors()
    write_container(path, config, tensors)
    got_config, got_tensors = read_container(path)
    assert got_config == config
    assert set(got_tensors) == set(tensors)
    for name, value in tensors.items():
        assert got_tensors[name].dtype == value.dtype
        assert got_tensors[name].shape == value.shape
        assert np.array_equal(got_tensors[name], value)


def test_container_bytes_are_deterministic(tmp_path):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    write_container(a, {"x": 1}, sample_tensors())
    write_container(b, {"x": 1}, sample_tensors())
    assert a.read_bytes() == b.read_bytes()


def test_container_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        read_container(path)


def test_container_rejects_corruption(tmp_path):
    path = tmp_path / "state.ckpt"
    write_container(path, {}, sample_tensors())
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="CRC"):
        read_container(path)


def test_container_rejects_truncation(tmp_path):
    path = tmp_path / "state.ckpt"
    write_container(path, {}, sample_tensors())
    path.write_bytes(path.read_bytes()[:20])
    with pytest.raises(CheckpointError):
        read_container(path)


def test_container_rejects_unknown_version(tmp_path):
    path = tmp_path / "state.ckpt"
    write_container(path, {}, {})
    raw = path.read_bytes()
    payload = bytearray(raw[len(CHECKPOINT_MAGIC):-8])
    payload[:4] = struct.pack("<I", 999)
    path.write_bytes(CHECKPOINT_MAGIC + bytes(payload) + struct.pack("<Q", crc64(bytes(payload))))
    with pytest.raises(CheckpointError, match="version 999"):
        read_container(path)


def test_container_rejects_trailing_bytes(tmp_path):
    path = tmp_path / "state.ckpt"
    write_container(path, {}, {"w": np.zeros(2)})
    raw = path.read_bytes()
    payload = raw[len(CHECKPOINT_MAGIC):-8] + b"\x00\x00"
    path.write_bytes(CHECKPOINT_MAGIC + payload + struct.pack("<Q", crc64(payload)))
    with pytest.raises(CheckpointError, match="trailing"):
        read_container(path)


# --- model checkpoints -------------------------------------------------------


def small_checkpoint(kind="gru", seed=3):
    config = ModuleConfig.for_kind(kind, direction="bi", input_dim=6, hidden=4,
                                   layers=2, input_proj=5, dropout_p=0.0,
                                   esn=EsnParams(density=0.5, seed=seed), seed=seed)
    module = TemporalModule(config)
    readout = Readout(module.exposed_dim, 3, seed=seed + 1)
    rng = np.random.default_rng(seed + 2)
    moments = {}
    for name, value, trainable in all_named_parameters(module, readout):
        if trainable:
            moments[f"m.{name}"] = rng.standard_normal(value.shape)
            moments[f"v.{name}"] = rng.random(value.shape)
    moments["t"] = np.array(17, dtype=np.int64)
    return Checkpoint(
        module=module, readout=readout, class_names=("a", "b", "c"),
        epoch=12, val_psds1=0.625, config_hash=config_hash(config),
        moments=moments,
        feature_norm=(rng.standard_normal(6), rng.random(6) + 0.5),
        postproc={"median_window": [1, 3, 5], "class_thresholds": [0.4, 0.5, 0.6]},
        extra={"note": "unit"},
    )


def test_checkpoint_roundtrip(tmp_path):
    path = tmp_path / "model.ckpt"
    original = small_checkpoint()
    original.save(path)
    loaded = Checkpoint.load(path)
    for (name, a, ta), (_, b, tb) in zip(
        all_named_parameters(original.module, original.readout),
        all_named_parameters(loaded.module, loaded.readout),
    ):
        assert np.array_equal(a, b), name
        assert ta == tb
    assert loaded.class_names == original.class_names
    assert loaded.epoch == 12
    assert loaded.val_psds1 == 0.625
    assert loaded.config_hash == original.config_hash
    assert loaded.postproc == original.postproc
    assert loaded.extra == {"note": "unit"}
    assert set(loaded.moments) == set(original.moments)
    for key, value in original.moments.items():
        assert np.array_equal(loaded.moments[key], value)
    assert np.array_equal(loaded.feature_norm[0], original.feature_norm[0])
    assert np.array_equal(loaded.feature_norm[1], original.feature_norm[1])


def test_checkpoint_esn_reservoir_survives(tmp_path):
    path = tmp_path / "esn.ckpt"
    original = small_checkpoint("esn", seed=5)
    frozen = original.module.frozen_hash()
    original.save(path)
    loaded = Checkpoint.load(path)
    assert loaded.module.frozen_hash() == frozen
    assert np.array_equal(loaded.module.blocks[0].fwd.W, original.module.blocks[0].fwd.W)


def test_checkpoint_missing_tensor(tmp_path):
    path = tmp_path / "model.ckpt"
    small_checkpoint().save(path)
    config, tensors = read_container(path)
    del tensors["readout.b"]
    write_container(path, config, tensors)
    with pytest.raises(CheckpointError, match="missing tensor 'readout.b'"):
        Checkpoint.load(path)


def test_checkpoint_shape_mismatch(tmp_path):
    path = tmp_path / "model.ckpt"
    small_checkpoint().save(path)
    config, tensors = read_container(path)
    tensors["readout.W"] = np.zeros((2, 2))
    write_container(path, config, tensors)
    with pytest.raises(CheckpointError, match="readout.W"):
        Checkpoint.load(path)


def test_checkpoint_without_optional_blocks(tmp_path):
    path = tmp_path / "bare.ckpt"
    ckpt = small_checkpoint()
    ckpt.moments = None
    ckpt.feature_norm = None
    ckpt.postproc = None
    ckpt.save(path)
    loaded = Checkpoint.load(path)
    assert loaded.moments is None
    assert loaded.feature_norm is None
    assert loaded.postproc is None
