"""Few-shot user adaptation: sample K support clips from a fixed pool,
fine-tune a single-class detector on them, and score it on a held-out
query set. Repeated over a seed list to expose run-to-run variability.

Two adaptation regimes: `bigru` trains the whole temporal module plus the
readout; `biesn` keeps its reservoirs frozen and trains the readout only.
Frames of the target class are positives, every other frame of a support
clip is a negative. Selection keeps the iterate with the lowest support
loss (there is no validation split at K <= 5), with the initial state
included as a candidate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import models
from .data import DatasetSplit
from .metrics import PsdsConfig, psds
from .models import EsnParams, ModuleConfig, Readout, TemporalModule
from .timeline import ClipAnnotation
from .training import AdamState, TrainConfig, adam_step, predict_posteriors

MODEL_KINDS = ("bigru", "biesn")


class FewShotError(ValueError):
    """Protocol violations: bad K, missing labels, support/query overlap."""


@dataclass(frozen=True)
class FewShotProtocol:
    support_pool: tuple[str, ...]
    target_class: str = "eating"
    k_values: tuple[int, ...] = (1, 2, 3, 4, 5)
    seeds: tuple[int, ...] = tuple(range(10))

    def __post_init__(self):
        if not self.support_pool or len(set(self.support_pool)) != len(self.support_pool):
            raise FewShotError("support pool must be non-empty without duplicates")
        if not self.k_values or min(self.k_values) < 1:
            raise FewShotError(f"bad K values {self.k_values}")
        if max(self.k_values) > len(self.support_pool):
            raise FewShotError(f"K={max(self.k_values)} exceeds pool size "
                               f"{len(self.support_pool)}")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise FewShotError("seed list must be non-empty without duplicates")

    @property
    def runs(self) -> int:
        return len(self.seeds)


@dataclass(frozen=True)
class AdaptConfig:
    epochs: int = 50
    learning_rate: float = 1e-3
    gru_hidden: int = 64
    gru_proj: int = 64
    gru_layers: int = 2
    dropout_p: float = 0.0
    reservoir: int = 256
    esn: EsnParams = EsnParams()
    psds: PsdsConfig = PsdsConfig()


def sample_support(pool, k: int, seed: int) -> tuple[str, ...]:
    """Uniform draw of k clips without replacement, stable per seed; the
    returned ids keep the pool's order."""
    pool = tuple(pool)
    if not 1 <= k <= len(pool):
        raise FewShotError(f"K must be in 1..{len(pool)}, got {k}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, len(pool), k]))
    picked = sorted(rng.choice(len(pool), size=k, replace=False))
    return tuple(pool[i] for i in picked)


def binary_view(split: DatasetSplit, target_class: str,
                clip_ids=None, require_target: bool = False) -> DatasetSplit:
    """Restrict a split to one class (C=1) and optionally to a clip subset.
    Reference events of other classes are dropped from the annotations."""
    if target_class not in split.class_names:
        raise FewShotError(f"class {target_class!r} not in split classes "
                           f"{split.class_names}")
    col = split.class_names.index(target_class)
    ids = list(clip_ids) if clip_ids is not None else list(split.clip_ids)
    missing = set(ids) - set(split.clip_ids)
    if missing:
        raise FewShotError(f"clips not in split {split.name!r}: {sorted(missing)}")
    index = {cid: i for i, cid in enumerate(split.clip_ids)}
    rows = [index[c] for c in ids]
    refs = []
    for cid in ids:
        ann = split.refs[index[cid]]
        events = tuple(e for e in ann.events if e.label == target_class)
        if require_target and not events:
            raise FewShotError(f"support clip {cid!r} has no "
                               f"{target_class!r} events")
        refs.append(ClipAnnotation(ann.clip_id, ann.duration, events))
    return DatasetSplit(
        name=f"{split.name}:{target_class}", clip_ids=ids,
        features=split.features[rows],
        targets=split.targets[rows][:, :, col:col + 1].copy(),
        refs=refs, class_names=(target_class,), frame_period=split.frame_period,
    )


def make_model(kind: str, input_dim: int, cfg: AdaptConfig,
               seed: int) -> tuple[TemporalModule, Readout]:
    if kind == "bigru":
        config = ModuleConfig.for_kind(
            "gru", direction="bi", input_dim=input_dim, hidden=cfg.gru_hidden,
            layers=cfg.gru_layers, input_proj=cfg.gru_proj,
            dropout_p=cfg.dropout_p, seed=seed,
        )
    elif kind == "biesn":
        config = ModuleConfig.for_kind(
            "esn", direction="bi", input_dim=input_dim, hidden=cfg.reservoir,
            esn=EsnParams(
                spectral_radius=cfg.esn.spectral_radius, leak=cfg.esn.leak,
                input_scale=cfg.esn.input_scale, density=cfg.esn.density,
                seed=seed,
            ),
            seed=seed,
        )
    else:
        raise FewShotError(f"unknown model kind {kind!r}; expected one of "
                           f"{MODEL_KINDS}")
    module = TemporalModule(config)
    return module, Readout(module.exposed_dim, 1, seed=seed + 1)


def adapt(module: TemporalModule, readout: Readout, support: DatasetSplit,
          cfg: AdaptConfig, seed: int) -> float:
    """Full-batch fine-tuning on the support clips; restores the iterate
    with the lowest support loss and returns that loss."""
    params = models.all_named_parameters(module, readout)
    state = AdamState(params)
    train_cfg = TrainConfig(learning_rate=cfg.learning_rate, batch_size=len(support),
                            max_epochs=max(cfg.epochs, 1))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    x, y = support.features, support.targets

    def loss_of():
        h, _ = module.forward_batch(x)
        loss, _ = models.bce_loss_and_dlogits(readout.logits(h), y)
        return loss

    best_loss = loss_of()
    best = {name: value.copy() for name, value, _ in params}
    for epoch in range(cfg.epochs):
        loss, grads = models.backward(module, readout, x, y,
                                      train_mode=True, rng=rng)
        if not np.isfinite(loss):
            raise FewShotError(f"support loss diverged at epoch {epoch}")
        adam_step(params, grads, state, train_cfg, context=f"epoch {epoch}")
        after = loss_of()
        if after < best_loss:
            best_loss = after
            best = {name: value.copy() for name, value, _ in params}
    for name, value, _ in params:
        np.copyto(value, best[name])
    return best_loss


def load_init(module: TemporalModule, init_params: dict) -> None:
    """Overwrite every module tensor (reservoirs included) from a name ->
    array dict, as produced by `named_parameters`. The readout is left
    untouched: a warm start still gets a fresh single-class head."""
    for name, value, _ in module.named_parameters():
        src = init_params.get(name)
        if src is None or np.shape(src) != value.shape:
            have = "missing" if src is None else f"shape {np.shape(src)}"
            raise FewShotError(f"init checkpoint does not fit this model: "
                               f"parameter {name!r} ({have}, want {value.shape})")
        np.copyto(value, src)


def adapt_and_eval(kind: str, support: DatasetSplit, query: DatasetSplit,
                   cfg: AdaptConfig = AdaptConfig(), seed: int = 0,
                   init_params: dict | None = None) -> float:
    """Train `kind` on a binary support split and return PSDS on the query
    split. Both splits must already be single-class views."""
    if support.class_names != query.class_names or len(support.class_names) != 1:
        raise FewShotError("support and query must be single-class views of "
                           "the same class")
    module, readout = make_model(kind, support.features.shape[-1], cfg, seed)
    if init_params is not None:
        load_init(module, init_params)
    adapt(module, readout, support, cfg, seed)
    posteriors = predict_posteriors(module, readout, query.features)
    return psds(query.refs, query.posteriors_as_dict(posteriors),
                query.class_names, config=cfg.psds,
                frame_period=query.frame_period).value


@dataclass
class FewShotResult:
    target_class: str
    rows: list[dict] = field(default_factory=list)

    def values(self, model: str, k: int) -> list[float]:
        return [r["psds1"] for r in self.rows if r["model"] == model and r["K"] == k]

    def summary(self) -> list[dict]:
        out = []
        for model in sorted({r["model"] for r in self.rows}):
            for k in sorted({r["K"] for r in self.rows if r["model"] == model}):
                vals = np.array(self.values(model, k))
                out.append({"model": model, "K": k,
                            "mean": float(vals.mean()),
                            "std": float(vals.std())})
        return out

    def write_rows_tsv(self, path) -> None:
        lines = ["model\tK\tseed\tpsds1"]
        lines += [f"{r['model']}\t{r['K']}\t{r['seed']}\t{r['psds1']:.6f}"
                  for r in self.rows]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    def write_summary_tsv(self, path) -> None:
        lines = ["model\tK\tmean\tstd"]
        lines += [f"{r['model']}\t{r['K']}\t{r['mean']:.6f}\t{r['std']:.6f}"
                  for r in self.summary()]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


def run_protocol(protocol: FewShotProtocol, support_split: DatasetSplit,
                 query_split: DatasetSplit, kinds=MODEL_KINDS,
                 cfg: AdaptConfig = AdaptConfig(), progress=None,
                 init_params: dict | None = None) -> FewShotResult:
    """Every (model, K, seed) combination once. The support pool must be
    disjoint from the query clips. `init_params` warm-starts every run's
    temporal module from the given tensors; it must fit all kinds run, so
    callers usually restrict `kinds` when passing it."""
    overlap = set(protocol.support_pool) & set(query_split.clip_ids)
    if overlap:
        raise FewShotError(f"query clips appear in the support pool: "
                           f"{sorted(overlap)}")
    missing = set(protocol.support_pool) - set(support_split.clip_ids)
    if missing:
        raise FewShotError(f"support pool clips not found: {sorted(missing)}")
    query = binary_view(query_split, protocol.target_class)
    result = FewShotResult(target_class=protocol.target_class)
    for kind in kinds:
        for k in protocol.k_values:
            for seed in protocol.seeds:
                ids = sample_support(protocol.support_pool, k, seed)
                support = binary_view(support_split, protocol.target_class,
                                      clip_ids=ids, require_target=True)
                value = adapt_and_eval(kind, support, query, cfg, seed,
                                       init_params=init_params)
                row = {"model": kind, "K": k, "seed": seed, "psds1": value}
                result.rows.append(row)
                if progress:
                    progress(row)
    return result
