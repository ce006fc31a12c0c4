"""Supervised training: Adam on frame-wise binary cross-entropy, with
checkpoint selection on validation PSDS computed from raw posteriors.

Selection uses a single operating point (threshold 0.5, no median filter)
instead of the full 50-point sweep; the full sweep and post-processing
tuning happen once, after training, on the selected checkpoint.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import models
from .checkpoint import Checkpoint
from .metrics import PsdsConfig, psds
from .models import Readout, TemporalModule, all_named_parameters

SELECTION_PSDS = PsdsConfig(num_thresholds=1, threshold_min=0.5, threshold_max=0.5)


class TrainingError(RuntimeError):
    """Diverged loss, non-finite gradients, or invalid configuration."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 100
    early_stop_patience: int = 20
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise TrainingError(f"learning rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.early_stop_patience < 1:
            raise TrainingError("batch size, epochs, and patience must all be >= 1")
        if self.weight_decay < 0:
            raise TrainingError(f"weight decay must be >= 0, got {self.weight_decay}")


class AdamState:
    """First/second moment accumulators for every trainable tensor."""

    def __init__(self, params):
        self.t = 0
        self.m = {name: np.zeros_like(value) for name, value, trainable in params if trainable}
        self.v = {name: np.zeros_like(value) for name, value, trainable in params if trainable}

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"m.{k}": v for k, v in self.m.items()}
        out.update({f"v.{k}": v for k, v in self.v.items()})
        out["t"] = np.array(self.t, dtype=np.int64)
        return out


def adam_step(params, grads: dict, state: AdamState, cfg: TrainConfig,
              context: str = "") -> None:
    """One in-place Adam update over the trainable tensors. Frozen tensors
    are never touched; a non-finite gradient aborts with its tensor name.
    Weight decay is decoupled and applies to matrices only, never biases."""
    state.t += 1
    bc1 = 1.0 - cfg.beta1 ** state.t
    bc2 = 1.0 - cfg.beta2 ** state.t
    for name, value, trainable in params:
        if not trainable:
            continue
        if name not in grads:
            raise TrainingError(f"missing gradient for trainable tensor {name!r}"
                                + (f" ({context})" if context else ""))
        g = grads[name]
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient in tensor {name!r}"
                                + (f" ({context})" if context else ""))
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * np.square(g)
        value -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        if cfg.weight_decay and value.ndim > 1:
            value -= cfg.learning_rate * cfg.weight_decay * value


def predict_posteriors(module: TemporalModule, readout: Readout, features: np.ndarray,
                       chunk: int = 64) -> np.ndarray:
    """(N, T, D) features -> (N, T, C) posteriors, evaluation mode."""
    outputs = []
    for start in range(0, features.shape[0], chunk):
        outputs.append(models.forward_batch(module, readout, features[start:start + chunk]))
    return np.concatenate(outputs, axis=0)


def validation_psds(module, readout, split, config: PsdsConfig = SELECTION_PSDS,
                    postproc_window: int = 1) -> float:
    posteriors = predict_posteriors(module, readout, split.features)
    return psds(split.refs, split.posteriors_as_dict(posteriors), split.class_names,
                postproc_window=postproc_window, config=config,
                frame_period=split.frame_period).value


@dataclass
class FitResult:
    checkpoint: Checkpoint
    log: list[dict] = field(default_factory=list)
    stopped_epoch: int = 0

    @property
    def best_epoch(self) -> int:
        return self.checkpoint.epoch


def _snapshot(params) -> dict[str, np.ndarray]:
    return {name: value.copy() for name, value, _ in params}


def _restore(params, snapshot) -> None:
    for name, value, _ in params:
        np.copyto(value, snapshot[name])


def fit(module: TemporalModule, readout: Readout, train_split, val_split,
        cfg: TrainConfig = TrainConfig(), selection_config: PsdsConfig = SELECTION_PSDS,
        selection_window: int = 1, selection_burn_in: int = 0, feature_norm=None,
        log_path=None, progress=None) -> FitResult:
    """Train with seeded shuffling and keep the epoch with the best
    validation PSDS (ties keep the earliest).

    `train_split`/`val_split` carry (N, T, D) features and (N, T, C) targets
    (see data.DatasetSplit). `selection_window` median-smooths the selection
    metric; match it to the deployment smoothing when posteriors are too
    fragmented for the raw metric to rank epochs. `selection_burn_in`
    excludes the first epochs from checkpoint selection (and from the
    early-stop clock), for models whose validation score spikes before the
    fit has converged. `feature_norm` is stored in the checkpoint untouched;
    callers normalize features before calling."""
    if len(train_split) == 0 or len(val_split) == 0:
        raise TrainingError("training and validation splits must be non-empty")
    params = all_named_parameters(module, readout)
    state = AdamState(params)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    dropout_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    num_clips = len(train_split)
    config_hash = models.config_hash(module.config, {"classes": list(train_split.class_names)})

    # Cap so the final epoch always stays eligible for selection.
    burn_in = min(max(int(selection_burn_in), 0), cfg.max_epochs - 1)
    best_value = -np.inf
    best_epoch = 0
    best_tensors = None
    best_moments = None
    log: list[dict] = []
    log_file = Path(log_path).open("w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            started = time.perf_counter()
            order = shuffle_rng.permutation(num_clips)
            loss_sum = 0.0
            for bi, start in enumerate(range(0, num_clips, cfg.batch_size)):
                idx = order[start:start + cfg.batch_size]
                loss, grads = models.backward(
                    module, readout, train_split.features[idx], train_split.targets[idx],
                    train_mode=True, rng=dropout_rng,
                )
                if not np.isfinite(loss):
                    raise TrainingError(
                        f"loss diverged at epoch {epoch}, batch {bi}; "
                        f"last stable epoch: {epoch - 1}"
                    )
                adam_step(params, grads, state, cfg, context=f"epoch {epoch}, batch {bi}")
                loss_sum += loss * len(idx)
            train_loss = loss_sum / num_clips
            val_value = validation_psds(module, readout, val_split, selection_config,
                                        postproc_window=selection_window)
            if epoch > burn_in and val_value > best_value:
                best_value = val_value
                best_epoch = epoch
                best_tensors = _snapshot(params)
                best_moments = {k: v.copy() for k, v in state.tensors().items()}
            record = {
                "epoch": epoch,
                "train_loss": train_loss,
                "val_psds1": val_value,
                "lr": cfg.learning_rate,
                "seconds": round(time.perf_counter() - started, 6),
            }
            log.append(record)
            if log_file:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
            if progress:
                progress(record)
            if epoch - max(best_epoch, burn_in) >= cfg.early_stop_patience:
                break
    finally:
        if log_file:
            log_file.close()
    _restore(params, best_tensors)
    checkpoint = Checkpoint(
        module=module, readout=readout, class_names=train_split.class_names,
        epoch=best_epoch, val_psds1=float(best_value), config_hash=config_hash,
        moments=best_moments, feature_norm=feature_norm,
    )
    return FitResult(checkpoint=checkpoint, log=log, stopped_epoch=len(log))
