"""Random and TPE search over reservoir dynamics and learning rate,
maximizing validation PSDS.

The TPE sampler is intentionally small: after a random warm-up it splits
the history at the top objective quantile, fits independent per-dimension
Gaussian KDEs (Scott bandwidth, log space for log-uniform dimensions) to
the good and bad sets, draws candidates from the good KDE, and keeps the
candidate with the best good/bad density ratio. A bidirectional reservoir
consumes one sampled config for both directions.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import gaussian_kde

from .models import EsnParams
from .training import TrainConfig

TPE_WARMUP = 20
TPE_GAMMA = 0.25
TPE_CANDIDATES = 24

SAMPLERS = ("random", "tpe")


class HpoError(ValueError):
    """Invalid search space, sampler, or a study with no usable trials."""


@dataclass(frozen=True)
class Dimension:
    name: str
    low: float
    high: float
    log: bool = False

    def __post_init__(self):
        if not (0 < self.low < self.high) and self.log:
            raise HpoError(f"{self.name}: log-uniform bounds must be positive "
                           f"and increasing, got [{self.low}, {self.high}]")
        if self.low >= self.high:
            raise HpoError(f"{self.name}: bounds must increase, got "
                           f"[{self.low}, {self.high}]")

    def transform(self, x):
        return np.log(x) if self.log else x

    def untransform(self, t):
        return math.exp(t) if self.log else float(t)

    def sample(self, rng) -> float:
        t = rng.uniform(self.transform(self.low), self.transform(self.high))
        return self.clamp(self.untransform(t))

    def clamp(self, x: float) -> float:
        return min(max(x, self.low), self.high)


@dataclass(frozen=True)
class SearchSpace:
    dimensions: tuple[Dimension, ...]

    def __post_init__(self):
        names = [d.name for d in self.dimensions]
        if len(set(names)) != len(names):
            raise HpoError(f"duplicate dimension names in {names}")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(d.name for d in self.dimensions)

    def sample_random(self, rng) -> dict:
        return {d.name: d.sample(rng) for d in self.dimensions}

    def validate(self, config: dict) -> None:
        for d in self.dimensions:
            if not (d.low <= config[d.name] <= d.high):
                raise HpoError(f"{d.name}={config[d.name]} outside "
                               f"[{d.low}, {d.high}]")


def esn_search_space() -> SearchSpace:
    """Reservoir dynamics plus readout learning rate; density stays fixed."""
    return SearchSpace((
        Dimension("spectral_radius", 0.1, 1.8),
        Dimension("leak", 0.05, 1.0),
        Dimension("input_scale", 0.01, 5.0, log=True),
        Dimension("learning_rate", 1e-4, 3e-3, log=True),
    ))


def esn_params_from(config: dict, density: float = 0.1, seed: int = 0) -> EsnParams:
    return EsnParams(
        spectral_radius=config["spectral_radius"], leak=config["leak"],
        input_scale=config["input_scale"], density=density, seed=seed,
    )


def train_config_from(config: dict, base: TrainConfig = TrainConfig()) -> TrainConfig:
    return TrainConfig(
        learning_rate=config["learning_rate"], batch_size=base.batch_size,
        max_epochs=base.max_epochs, early_stop_patience=base.early_stop_patience,
        seed=base.seed, beta1=base.beta1, beta2=base.beta2, eps=base.eps,
        weight_decay=base.weight_decay,
    )


@dataclass
class Trial:
    id: int
    config: dict
    status: str  # ok | failed
    objective: float | None = None
    error: str = ""

    def to_dict(self) -> dict:
        return {"id": self.id, "config": self.config, "status": self.status,
                "objective": self.objective, "error": self.error}

    @classmethod
    def from_dict(cls, d: dict) -> "Trial":
        return cls(id=d["id"], config=d["config"], status=d["status"],
                   objective=d.get("objective"), error=d.get("error", ""))


def _kde_or_none(values: np.ndarray):
    if len(values) >= 2 and float(np.std(values)) > 1e-12:
        return gaussian_kde(values, bw_method="scott")
    return None


def _tpe_dimension(dim: Dimension, good: np.ndarray, bad: np.ndarray, rng) -> float:
    lo, hi = dim.transform(dim.low), dim.transform(dim.high)
    kde_good = _kde_or_none(good)
    kde_bad = _kde_or_none(bad)
    if kde_good is None:
        candidates = rng.uniform(lo, hi, TPE_CANDIDATES)
    else:
        candidates = np.clip(kde_good.resample(TPE_CANDIDATES, seed=rng)[0], lo, hi)
    dens_good = kde_good(candidates) if kde_good else np.ones(TPE_CANDIDATES)
    dens_bad = kde_bad(candidates) if kde_bad else np.ones(TPE_CANDIDATES)
    ratio = dens_good / np.maximum(dens_bad, 1e-300)
    return dim.clamp(dim.untransform(candidates[int(np.argmax(ratio))]))


def sample(space: SearchSpace, sampler: str, history: list, rng) -> dict:
    """Propose one config. `history` is a list of Trial records; the TPE
    branch looks only at trials with status ok."""
    if sampler not in SAMPLERS:
        raise HpoError(f"unknown sampler {sampler!r}; expected one of {SAMPLERS}")
    ok = [t for t in history if t.status == "ok"]
    if sampler == "random" or len(ok) < TPE_WARMUP:
        return space.sample_random(rng)
    ranked = sorted(ok, key=lambda t: t.objective, reverse=True)
    n_good = max(1, math.ceil(TPE_GAMMA * len(ranked)))
    good, bad = ranked[:n_good], ranked[n_good:]
    config = {}
    for dim in space.dimensions:
        g = np.array([dim.transform(t.config[dim.name]) for t in good])
        b = np.array([dim.transform(t.config[dim.name]) for t in bad])
        config[dim.name] = _tpe_dimension(dim, g, b, rng)
    return config


def load_study(path) -> list[Trial]:
    trials = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                trials.append(Trial.from_dict(json.loads(line)))
    return trials


def best_trial(history: list[Trial]) -> Trial:
    ok = [t for t in history if t.status == "ok"]
    if not ok:
        raise HpoError("no successful trials in the study")
    return max(ok, key=lambda t: t.objective)


def run_study(space: SearchSpace, objective_fn, budget: int = 150,
              sampler: str = "tpe", seed: int = 0, study_path=None,
              resume: bool = False, progress=None) -> tuple[Trial, list[Trial]]:
    """Run trials until the budget is reached; failures are recorded and
    never retried. Returns (best trial, full history). With `study_path`
    each trial is appended as one JSON line; `resume` continues an existing
    study file toward the same budget."""
    history: list[Trial] = []
    if resume and study_path and Path(study_path).exists():
        history = load_study(study_path)
    rng = np.random.default_rng(np.random.SeedSequence([seed, len(history)]))
    mode = "a" if history else "w"
    fh = Path(study_path).open(mode, encoding="utf-8") if study_path else None
    try:
        while len(history) < budget:
            config = sample(space, sampler, history, rng)
            trial = Trial(id=len(history) + 1, config=config, status="ok")
            try:
                value = float(objective_fn(config))
                if not math.isfinite(value):
                    raise HpoError(f"objective returned {value}")
                trial.objective = value
            except Exception as exc:  # a failed trial must not sink the study
                trial.status = "failed"
                trial.objective = None
                trial.error = f"{type(exc).__name__}: {exc}"
            history.append(trial)
            if fh:
                fh.write(json.dumps(trial.to_dict()) + "\n")
                fh.flush()
            if progress:
                progress(trial)
    finally:
        if fh:
            fh.close()
    return best_trial(history), history
