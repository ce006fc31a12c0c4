"""Command-line entry point tying synthesis, training, evaluation,
inference, hyperparameter search, and few-shot adaptation together.

Every command accepts `--seed` and an optional `--config <file>` (JSON or
TOML). Explicit command-line flags override file values; the effective
configuration is echoed to `config.resolved.json` in the output directory
so a run can be reproduced from that file alone.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import models
from .checkpoint import Checkpoint
from .data import SPLIT_NAMES, discover_classes, feature_stats, load_split
from .features import FrontendConfig, extract_features, read_embeddings
from .fewshot import (
    MODEL_KINDS,
    AdaptConfig,
    FewShotError,
    FewShotProtocol,
    load_init,
    make_model,
    run_protocol,
)
from .hpo import esn_params_from, esn_search_space, run_study, train_config_from
from .metrics import MatchConfig, event_f1, psds, segment_f1
from .models import EsnParams, ModuleConfig, Readout, TemporalModule
from .postproc import PostprocConfig, apply_postproc, tune
from .scenegen import SynthConfig, build_bank, synthesize_dataset
from .timeline import FrameGrid, write_strong_tsv
from .training import TrainConfig, fit, predict_posteriors
from .audio import load_wav

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

MODEL_CHOICES = ("linear", "gru", "lstm", "esn")


class UsageError(ValueError):
    """Bad invocation: missing inputs, malformed flag values."""


def _comma_ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _comma_floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _comma_strs(text: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in text.split(",") if x.strip())


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file {path} does not exist")
    if path.suffix.lower() == ".toml":
        try:
            import tomllib as toml_reader
        except ModuleNotFoundError:
            import tomli as toml_reader
        with path.open("rb") as fh:
            return toml_reader.load(fh)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}")


def resolve_config(args: argparse.Namespace, command: str) -> dict:
    """File config overlaid with every explicitly set CLI value."""
    resolved = {}
    if getattr(args, "config", None):
        resolved.update(load_config_file(args.config))
    for key, value in vars(args).items():
        if key in ("func", "config") or value is None:
            continue
        resolved[key] = value
    resolved["command"] = command
    return resolved


def _jsonable(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, tuple):
        return list(value)
    if isinstance(value, (np.integer, np.floating)):
        return value.item()
    return value


def write_resolved(out_dir, resolved: dict) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {k: _jsonable(v) for k, v in sorted(resolved.items())}
    (out_dir / "config.resolved.json").write_text(
        json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _require_dir(path, what: str) -> Path:
    path = Path(path)
    if not path.is_dir():
        raise UsageError(f"{what} directory {path} does not exist")
    return path


def _require_file(path, what: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"{what} file {path} does not exist")
    return path


def get(resolved: dict, key: str, default):
    value = resolved.get(key)
    return default if value is None else value


def _required(resolved: dict, key: str):
    value = resolved.get(key)
    if value is None:
        raise UsageError(f"--{key.replace('_', '-')} is required (flag or config file)")
    return value


# --- model assembly ----------------------------------------------------------


def _frontend_from(resolved: dict, seed: int) -> FrontendConfig:
    return FrontendConfig(
        n_fft=int(get(resolved, "n_fft", 1024)),
        n_mels=int(get(resolved, "n_mels", 64)),
        projection_dim=resolved.get("projection_dim"),
        seed=seed,
    )


def _module_config_from(resolved: dict, kind: str, direction: str,
                        input_dim: int, seed: int) -> ModuleConfig:
    esn = EsnParams(
        spectral_radius=float(get(resolved, "spectral_radius", 0.9)),
        leak=float(get(resolved, "leak", 0.5)),
        input_scale=float(get(resolved, "input_scale", 1.0)),
        density=float(get(resolved, "density", 0.1)),
        seed=seed,
    )
    hidden = int(get(resolved, "reservoir", 1024)) if kind == "esn" \
        else int(get(resolved, "hidden", 256))
    return ModuleConfig.for_kind(
        kind, direction=direction, input_dim=input_dim, hidden=hidden,
        layers=int(get(resolved, "layers", 2)),
        input_proj=int(get(resolved, "input_proj", 256)),
        dropout_p=float(get(resolved, "dropout", 0.3)),
        esn=esn, seed=seed,
    )


def _build_model(config: ModuleConfig, num_classes: int,
                 seed: int) -> tuple[TemporalModule, Readout]:
    module = TemporalModule(config)
    return module, Readout(module.exposed_dim, num_classes, seed=seed + 1)


# --- commands ----------------------------------------------------------------


def cmd_synth(args) -> int:
    resolved = resolve_config(args, "synth")
    bank_dir = _require_dir(_required(resolved, "bank"), "source bank")
    out = Path(_required(resolved, "out"))
    ref = get(resolved, "ref_db", -50.0)
    if isinstance(ref, (list, tuple)):
        ref = tuple(float(v) for v in ref)
    else:
        ref = float(ref)
    cfg = SynthConfig(
        clip_duration=float(get(resolved, "clip_duration", 10.0)),
        events_per_clip=tuple(get(resolved, "events", (1, 4))),
        snr_db=tuple(get(resolved, "snr", (6.0, 30.0))),
        classes=tuple(resolved["classes"]) if resolved.get("classes") else None,
        counts=tuple(get(resolved, "counts", (6000, 2000, 2000))),
        ref_db=ref,
        sample_rate=int(get(resolved, "sample_rate", 16000)),
        event_duration=tuple(get(resolved, "event_duration", (0.25, 5.0))),
    )
    seed = int(get(resolved, "seed", 0))
    bank = build_bank(bank_dir)
    manifest = synthesize_dataset(bank, cfg, out, seed=seed,
                                  overwrite=bool(resolved.get("overwrite")))
    write_resolved(out, resolved)
    total = sum(len(v) for v in manifest["specs"].values())
    print(f"synthesized {total} clips into {out} "
          f"({'/'.join(str(c) for c in cfg.counts)})")
    return EXIT_OK


def _load_normalized_splits(root, splits, frontend, class_names, use_embeddings,
                            normalize):
    loaded = {s: load_split(root, s, frontend, class_names=class_names,
                            use_embeddings=use_embeddings) for s in splits}
    stats = None
    if normalize:
        first = loaded[splits[0]]
        stats = feature_stats(first.features)
        for split in loaded.values():
            split.features = (split.features - stats[0]) / stats[1]
    return loaded, stats


def cmd_train(args) -> int:
    resolved = resolve_config(args, "train")
    kind = _required(resolved, "model")
    if kind not in MODEL_CHOICES:
        raise UsageError(f"unknown model {kind!r}; choose from {MODEL_CHOICES}")
    direction = "bi" if resolved.get("bi") else "uni"
    seed = int(get(resolved, "seed", 0))

    if resolved.get("dry_run") and resolved.get("input_dim") and resolved.get("num_classes"):
        config = _module_config_from(resolved, kind, direction,
                                     int(resolved["input_dim"]), seed)
        module, readout = _build_model(config, int(resolved["num_classes"]), seed)
        print(f"trainable parameters: {models.count_trainable(module, readout)}")
        return EXIT_OK

    root = _require_dir(_required(resolved, "data"), "dataset")
    out = Path(_required(resolved, "out"))
    frontend = _frontend_from(resolved, seed)
    class_names = discover_classes(root, ("train", "validation"))
    use_emb = bool(resolved.get("use_embeddings"))
    normalize = not resolved.get("no_normalize")
    loaded, stats = _load_normalized_splits(
        root, ("train", "validation"), frontend, class_names, use_emb, normalize)
    train_split, val_split = loaded["train"], loaded["validation"]

    config = _module_config_from(resolved, kind, direction,
                                 train_split.features.shape[-1], seed)
    module, readout = _build_model(config, len(class_names), seed)
    if resolved.get("dry_run"):
        print(f"trainable parameters: {models.count_trainable(module, readout)}")
        return EXIT_OK

    train_cfg = TrainConfig(
        learning_rate=float(get(resolved, "lr", 1e-4)),
        batch_size=int(get(resolved, "batch_size", 64)),
        max_epochs=int(get(resolved, "epochs", 100)),
        early_stop_patience=int(get(resolved, "patience", 20)),
        seed=seed,
        weight_decay=float(get(resolved, "weight_decay", 0.0)),
    )
    out.mkdir(parents=True, exist_ok=True)
    result = fit(module, readout, train_split, val_split, train_cfg,
                 feature_norm=stats, log_path=out / "train_log.jsonl")
    result.checkpoint.extra = {"frontend": frontend.to_dict(),
                               "use_embeddings": use_emb}
    result.checkpoint.save(out / "checkpoint.ckpt")
    write_resolved(out, resolved)
    print(f"best epoch {result.best_epoch} "
          f"val_psds1 {result.checkpoint.val_psds1:.4f} "
          f"({len(result.log)} epochs run)")
    return EXIT_OK


def _posterior_dict(split, module, readout, oracle: bool):
    if oracle:
        arr = split.targets.astype(np.float64)
    else:
        arr = predict_posteriors(module, readout, split.features)
    return arr, split.posteriors_as_dict(arr)


def cmd_eval(args) -> int:
    resolved = resolve_config(args, "eval")
    ckpt_path = _require_file(_required(resolved, "checkpoint"), "checkpoint")
    root = _require_dir(_required(resolved, "data"), "dataset")
    split_name = get(resolved, "split", "test")
    out = Path(_required(resolved, "out"))
    oracle = bool(resolved.get("oracle"))

    checkpoint = Checkpoint.load(ckpt_path)
    extra = checkpoint.extra or {}
    frontend = FrontendConfig.from_dict(extra["frontend"]) if "frontend" in extra \
        else _frontend_from(resolved, int(get(resolved, "seed", 0)))
    use_emb = bool(get(resolved, "use_embeddings", extra.get("use_embeddings")))

    splits_needed = [split_name]
    thresholds_from = get(resolved, "thresholds_from", "validation")
    fixed = resolved.get("thresholds")
    if fixed is None and thresholds_from == "validation" and split_name != "validation":
        splits_needed.append("validation")
    loaded = {}
    for name in splits_needed:
        split = load_split(root, name, frontend,
                           class_names=checkpoint.class_names,
                           use_embeddings=use_emb)
        if checkpoint.feature_norm is not None:
            split.features = (split.features - checkpoint.feature_norm[0]) \
                / checkpoint.feature_norm[1]
        loaded[name] = split
    eval_split = loaded[split_name]

    objective = get(resolved, "objective", "psds1")
    if fixed is not None:
        postproc = PostprocConfig(median_window=int(get(resolved, "window", 1)),
                                  class_thresholds=float(fixed))
    elif thresholds_from == "validation":
        val = loaded.get("validation", eval_split)
        _, val_posteriors = _posterior_dict(val, checkpoint.module,
                                            checkpoint.readout, oracle)
        postproc = tune(val.refs, val_posteriors, checkpoint.class_names,
                        objective=objective, frame_period=val.frame_period).config
    else:
        postproc = PostprocConfig()

    _, posteriors = _posterior_dict(eval_split, checkpoint.module,
                                    checkpoint.readout, oracle)
    grid = FrameGrid(eval_split.frame_period, eval_split.features.shape[1])
    preds = [apply_postproc(posteriors[cid], postproc, grid,
                            checkpoint.class_names, clip_id=cid,
                            duration=eval_split.refs[i].duration)
             for i, cid in enumerate(eval_split.clip_ids)]
    match = MatchConfig(offset_rule=get(resolved, "offset_rule", "strict_collar"))
    report = {
        "split": split_name,
        "classes": list(checkpoint.class_names),
        "postproc": postproc.to_dict(),
        "psds1": psds(eval_split.refs, posteriors, checkpoint.class_names,
                      postproc_window=postproc.median_window,
                      frame_period=eval_split.frame_period).value,
        "event_f1": event_f1(eval_split.refs, preds, match,
                             class_names=checkpoint.class_names).macro,
        "segment_f1": segment_f1(eval_split.refs, preds, match,
                                 class_names=checkpoint.class_names).macro,
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n",
                                      encoding="utf-8")
    write_resolved(out, resolved)
    print(f"{split_name}: psds1 {report['psds1']:.4f} "
          f"event_f1 {report['event_f1']:.4f} segment_f1 {report['segment_f1']:.4f}")
    return EXIT_OK


def cmd_detect(args) -> int:
    resolved = resolve_config(args, "detect")
    ckpt_path = _require_file(_required(resolved, "checkpoint"), "checkpoint")
    input_path = _require_file(_required(resolved, "input"), "input")
    out_path = Path(_required(resolved, "out"))

    checkpoint = Checkpoint.load(ckpt_path)
    extra = checkpoint.extra or {}
    if input_path.suffix == ".emb":
        feats = read_embeddings(input_path)
    else:
        frontend = FrontendConfig.from_dict(extra["frontend"]) if "frontend" in extra \
            else _frontend_from(resolved, int(get(resolved, "seed", 0)))
        feats = extract_features(load_wav(input_path), frontend)
    frames = feats.frames
    if checkpoint.feature_norm is not None:
        frames = (frames - checkpoint.feature_norm[0]) / checkpoint.feature_norm[1]

    posteriors = models.forward(checkpoint.module, checkpoint.readout, frames)
    if resolved.get("threshold") is not None:
        postproc = PostprocConfig(median_window=int(get(resolved, "window", 1)),
                                  class_thresholds=float(resolved["threshold"]))
    elif checkpoint.postproc:
        postproc = PostprocConfig.from_dict(checkpoint.postproc)
    else:
        postproc = PostprocConfig()
    grid = FrameGrid(feats.frame_period, frames.shape[0])
    ann = apply_postproc(posteriors, postproc, grid, checkpoint.class_names,
                         clip_id=input_path.name)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_strong_tsv([ann], out_path)
    print(f"{input_path.name}: {len(ann.events)} events -> {out_path}")
    return EXIT_OK


def cmd_hpo(args) -> int:
    resolved = resolve_config(args, "hpo")
    root = _require_dir(_required(resolved, "data"), "dataset")
    out = Path(_required(resolved, "out"))
    seed = int(get(resolved, "seed", 0))
    direction = "bi" if resolved.get("bi") else "uni"
    frontend = _frontend_from(resolved, seed)
    class_names = discover_classes(root, ("train", "validation"))
    loaded, stats = _load_normalized_splits(
        root, ("train", "validation"), frontend, class_names,
        bool(resolved.get("use_embeddings")), not resolved.get("no_normalize"))
    train_split, val_split = loaded["train"], loaded["validation"]
    reservoir = int(get(resolved, "reservoir", 256))
    epochs = int(get(resolved, "epochs", 10))
    base_cfg = TrainConfig(
        learning_rate=1e-3, batch_size=int(get(resolved, "batch_size", 64)),
        max_epochs=epochs, early_stop_patience=max(epochs, 1), seed=seed,
    )

    def objective(config: dict) -> float:
        module_config = ModuleConfig.for_kind(
            "esn", direction=direction, input_dim=train_split.features.shape[-1],
            hidden=reservoir, esn=esn_params_from(config, seed=seed), seed=seed,
        )
        module, readout = _build_model(module_config, len(class_names), seed)
        result = fit(module, readout, train_split, val_split,
                     train_config_from(config, base_cfg))
        return result.checkpoint.val_psds1

    out.mkdir(parents=True, exist_ok=True)
    best, history = run_study(
        esn_search_space(), objective, budget=int(get(resolved, "budget", 150)),
        sampler=get(resolved, "sampler", "tpe"), seed=seed,
        study_path=out / "study.jsonl", resume=bool(resolved.get("resume")),
    )
    (out / "best.json").write_text(json.dumps(best.to_dict(), indent=1, sort_keys=True) + "\n",
                                   encoding="utf-8")
    write_resolved(out, resolved)
    print(f"best trial {best.id}: psds1 {best.objective:.4f} {best.config}")
    return EXIT_OK


def cmd_fewshot(args) -> int:
    resolved = resolve_config(args, "fewshot")
    root = _require_dir(_required(resolved, "data"), "dataset")
    out = Path(_required(resolved, "out"))
    seed = int(get(resolved, "seed", 0))
    target = get(resolved, "target_class", "eating")
    frontend = _frontend_from(resolved, seed)
    class_names = discover_classes(root, SPLIT_NAMES)
    support_name = get(resolved, "support_split", "train")
    query_name = get(resolved, "query_split", "test")
    loaded, _ = _load_normalized_splits(
        root, (support_name, query_name), frontend, class_names,
        bool(resolved.get("use_embeddings")), not resolved.get("no_normalize"))
    support_split, query_split = loaded[support_name], loaded[query_name]

    if resolved.get("pool"):
        pool = tuple(resolved["pool"])
    else:
        pool_size = int(get(resolved, "pool_size", 8))
        with_target = [cid for cid, ann in zip(support_split.clip_ids, support_split.refs)
                       if any(e.label == target for e in ann.events)]
        if len(with_target) < pool_size:
            raise UsageError(f"only {len(with_target)} clips with {target!r} events "
                             f"in split {support_name!r}; need {pool_size}")
        pool = tuple(with_target[:pool_size])

    protocol = FewShotProtocol(
        support_pool=pool, target_class=target,
        k_values=tuple(get(resolved, "k", (1, 2, 3, 4, 5))),
        seeds=tuple(get(resolved, "seeds", tuple(range(10)))),
    )
    cfg = AdaptConfig(
        epochs=int(get(resolved, "epochs", 50)),
        learning_rate=float(get(resolved, "lr", 1e-3)),
        gru_hidden=int(get(resolved, "hidden", 64)),
        gru_proj=int(get(resolved, "input_proj", 64)),
        reservoir=int(get(resolved, "reservoir", 256)),
    )
    kinds = tuple(get(resolved, "models", MODEL_KINDS))
    bad = set(kinds) - set(MODEL_KINDS)
    if bad:
        raise UsageError(f"unknown fewshot models {sorted(bad)}; "
                         f"choose from {MODEL_KINDS}")
    init_params = None
    if resolved.get("init_from"):
        # Adaptation defaults to a fresh model; a warm start must name one
        # regime and a checkpoint whose module matches its architecture.
        if len(kinds) != 1:
            raise UsageError("--init-from needs a single --models entry")
        ckpt_path = Path(resolved["init_from"])
        if not ckpt_path.is_file():
            raise UsageError(f"checkpoint not found: {ckpt_path}")
        ckpt = Checkpoint.load(ckpt_path)
        init_params = {n: v for n, v, _ in ckpt.module.named_parameters()}
        probe, _ = make_model(kinds[0], support_split.features.shape[-1], cfg, 0)
        try:
            load_init(probe, init_params)
        except FewShotError as exc:
            raise UsageError(str(exc)) from exc
    result = run_protocol(protocol, support_split, query_split, kinds=kinds,
                          cfg=cfg, init_params=init_params)
    out.mkdir(parents=True, exist_ok=True)
    result.write_rows_tsv(out / "fewshot_runs.tsv")
    result.write_summary_tsv(out / "fewshot_summary.tsv")
    write_resolved(out, resolved)
    for row in result.summary():
        print(f"{row['model']} K={row['K']}: "
              f"{row['mean']:.4f} +/- {row['std']:.4f}")
    return EXIT_OK


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="triggersed",
        description="Trigger-sound event detection: synthesize, train, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON or TOML config file")
        p.add_argument("--seed", type=int, help="global random seed (default 0)")
        p.add_argument("--jobs", type=int, help="worker cap (currently single-process)")

    p = sub.add_parser("synth", help="synthesize a strongly labeled dataset")
    common(p)
    p.add_argument("--bank", help="source bank directory")
    p.add_argument("--out", help="output dataset directory")
    p.add_argument("--classes", type=_comma_strs)
    p.add_argument("--counts", type=_comma_ints, help="train,validation,test clip counts")
    p.add_argument("--events", type=_comma_ints, help="min,max events per clip")
    p.add_argument("--snr", type=_comma_floats, help="min,max SNR in dB")
    p.add_argument("--event-duration", dest="event_duration", type=_comma_floats)
    p.add_argument("--clip-duration", dest="clip_duration", type=float)
    p.add_argument("--sample-rate", dest="sample_rate", type=int)
    p.add_argument("--ref-db", dest="ref_db", type=float)
    p.add_argument("--overwrite", action="store_true", default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a temporal module + readout")
    common(p)
    p.add_argument("--data", help="dataset root directory")
    p.add_argument("--out")
    p.add_argument("--model", choices=MODEL_CHOICES)
    p.add_argument("--bi", action="store_true", default=None,
                   help="bidirectional temporal module")
    p.add_argument("--hidden", type=int)
    p.add_argument("--reservoir", type=int, help="reservoir units (esn)")
    p.add_argument("--layers", type=int)
    p.add_argument("--input-proj", dest="input_proj", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--spectral-radius", dest="spectral_radius", type=float)
    p.add_argument("--leak", type=float)
    p.add_argument("--input-scale", dest="input_scale", type=float)
    p.add_argument("--density", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--n-fft", dest="n_fft", type=int)
    p.add_argument("--n-mels", dest="n_mels", type=int)
    p.add_argument("--projection-dim", dest="projection_dim", type=int)
    p.add_argument("--use-embeddings", dest="use_embeddings",
                   action="store_true", default=None)
    p.add_argument("--no-normalize", dest="no_normalize",
                   action="store_true", default=None)
    p.add_argument("--dry-run", dest="dry_run", action="store_true", default=None,
                   help="report trainable parameter count and exit")
    p.add_argument("--input-dim", dest="input_dim", type=int,
                   help="with --dry-run: skip data loading, assume this width")
    p.add_argument("--num-classes", dest="num_classes", type=int,
                   help="with --dry-run: skip data loading, assume this many classes")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="dataset root directory")
    p.add_argument("--split", choices=SPLIT_NAMES)
    p.add_argument("--out")
    p.add_argument("--thresholds-from", dest="thresholds_from",
                   choices=("validation", "none"))
    p.add_argument("--thresholds", type=float,
                   help="fixed decision threshold (skips tuning)")
    p.add_argument("--window", type=int, help="median window with --thresholds")
    p.add_argument("--objective", choices=("psds1", "event_f1"))
    p.add_argument("--offset-rule", dest="offset_rule",
                   choices=("strict_collar", "collar_or_20pct"))
    p.add_argument("--use-embeddings", dest="use_embeddings",
                   action="store_true", default=None)
    p.add_argument("--oracle", action="store_true", default=None,
                   help="score the reference rasterization instead of the model")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("detect", help="run a checkpoint on one wav/embedding file")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--input", help="wav or .emb file")
    p.add_argument("--out", help="output TSV path")
    p.add_argument("--threshold", type=float)
    p.add_argument("--window", type=int)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("hpo", help="search reservoir dynamics on a dataset")
    common(p)
    p.add_argument("--data", help="dataset root directory")
    p.add_argument("--out")
    p.add_argument("--budget", type=int)
    p.add_argument("--sampler", choices=("tpe", "random"))
    p.add_argument("--bi", action="store_true", default=None)
    p.add_argument("--reservoir", type=int)
    p.add_argument("--epochs", type=int, help="trial training epochs")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--n-fft", dest="n_fft", type=int)
    p.add_argument("--n-mels", dest="n_mels", type=int)
    p.add_argument("--use-embeddings", dest="use_embeddings",
                   action="store_true", default=None)
    p.add_argument("--no-normalize", dest="no_normalize",
                   action="store_true", default=None)
    p.add_argument("--resume", action="store_true", default=None)
    p.set_defaults(func=cmd_hpo)

    p = sub.add_parser("fewshot", help="few-shot adaptation protocol")
    common(p)
    p.add_argument("--data", help="dataset root directory")
    p.add_argument("--out")
    p.add_argument("--target-class", dest="target_class")
    p.add_argument("--pool", type=_comma_strs, help="explicit support clip ids")
    p.add_argument("--pool-size", dest="pool_size", type=int)
    p.add_argument("--k", type=_comma_ints)
    p.add_argument("--seeds", type=_comma_ints)
    p.add_argument("--support-split", dest="support_split", choices=SPLIT_NAMES)
    p.add_argument("--query-split", dest="query_split", choices=SPLIT_NAMES)
    p.add_argument("--models", type=_comma_strs,
                   help="adaptation regimes to run (default bigru,biesn)")
    p.add_argument("--init-from", dest="init_from",
                   help="checkpoint to warm-start the temporal module from")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--hidden", type=int)
    p.add_argument("--input-proj", dest="input_proj", type=int)
    p.add_argument("--reservoir", type=int)
    p.add_argument("--n-fft", dest="n_fft", type=int)
    p.add_argument("--n-mels", dest="n_mels", type=int)
    p.add_argument("--use-embeddings", dest="use_embeddings",
                   action="store_true", default=None)
    p.add_argument("--no-normalize", dest="no_normalize",
                   action="store_true", default=None)
    p.set_defaults(func=cmd_fewshot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the usage message
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
