"""Command-line entry point: synth, prepare, train, eval, ablate, cost."""

from __future__ import annotations

import argparse
import copy
import csv
import datetime as dt
import hashlib
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .cost import estimate_cost
from .data import load_prepared, prepare, save_prepared
from .errors import (
    CheckpointError,
    ConfigError,
    GenerationError,
    IngestionError,
    MissingArtifactError,
)
from .metrics import compute_metrics
from .model import ModelConfig
from .synth import GenConfig, synth_generate
from .training import (
    TrainConfig,
    ablate,
    ablation_grid,
    ablation_table,
    bce_value,
    evaluate,
    predict,
    train,
    write_ablation,
    write_history,
    write_metrics,
)

log = logging.getLogger("msgat_gru")

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_GENERATION, EXIT_INGESTION, EXIT_MISSING = 0, 1, 2, 3, 4, 5

SEED_KEYS = ("data", "init", "train")
TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig) if f.name not in ("seed", "init_seed"))


def default_config() -> dict:
    """Every key the config file accepts, with its default."""
    return {
        "synth": {f.name: f.default for f in fields(GenConfig)},
        "model": ModelConfig().to_dict() | {"k": None},
        "train": {k: getattr(TrainConfig(), k) for k in TRAIN_KEYS},
        "split": {"ratios": [0.7, 0.1, 0.2]},
        "seeds": {"data": 0, "init": 0, "train": 0},
        "ablation": {"seeds": 3},
    }


def merge_config(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for section, values in override.items():
        if section not in out:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        unknown = set(values) - set(out[section])
        if unknown:
            raise ConfigError(f"unknown keys in section {section!r}: {sorted(unknown)}")
        out[section].update(values)
    return out


def load_config(path) -> dict:
    if path is None:
        return default_config()
    p = Path(path)
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: top level must be an object")
    return merge_config(default_config(), raw)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


class Resolved:
    """Typed view of a merged config dict."""

    def __init__(self, cfg: dict):
        self.raw = cfg
        self.gen = GenConfig.from_dict(cfg["synth"])
        model = dict(cfg["model"])
        self.model = ModelConfig.from_dict(model)
        unknown_seeds = set(cfg["seeds"]) - set(SEED_KEYS)
        if unknown_seeds:
            raise ConfigError(f"unknown seed keys: {sorted(unknown_seeds)}")
        seeds = cfg["seeds"]
        self.train = TrainConfig.from_dict(dict(cfg["train"], seed=seeds["train"], init_seed=seeds["init"]))
        self.data_seed = int(seeds["data"])
        ratios = cfg["split"]["ratios"]
        if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
        self.ratios = tuple(float(r) for r in ratios)
        self.ablation_seeds = int(cfg["ablation"]["seeds"])
        if self.ablation_seeds < 1:
            raise ConfigError("ablation.seeds must be >= 1")
        self.hash = config_hash(cfg)


def apply_overrides(cfg: dict, args) -> dict:
    """Flags win over the config file."""
    cfg = copy.deepcopy(cfg)
    mapping = {
        "num_nodes": ("synth", "num_nodes"),
        "days": ("synth", "span_days"),
        "rule_depth": ("synth", "rule_depth"),
        "accident_rate": ("synth", "accident_rate"),
        "S": ("model", "S"),
        "H": ("model", "H"),
        "d": ("model", "d"),
        "gru_depth": ("model", "gru_depth"),
        "T": ("model", "T"),
        "k": ("model", "k"),
        "threshold": ("model", "threshold"),
        "lr": ("train", "lr"),
        "batch_size": ("train", "batch_size"),
        "epochs": ("train", "max_epochs"),
        "patience": ("train", "patience"),
        "ablation_seeds": ("ablation", "seeds"),
    }
    for attr, (section, key) in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg[section][key] = value
    if getattr(args, "seed", None) is not None:
        cfg["seeds"] = {k: args.seed for k in SEED_KEYS}
    return cfg


def run_dir(root, cfg_hash: str, run_id: str | None) -> Path:
    name = run_id or f"{dt.datetime.now(dt.timezone.utc):%Y%m%dT%H%M%SZ}-{cfg_hash[:12]}"
    path = Path(root) / name
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_config(path: Path, cfg: dict, cfg_hash: str) -> None:
    payload = {"config_hash": cfg_hash, **cfg}
    (path / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- commands -----------------------------------------------------------------
def cmd_synth(args, rc: Resolved) -> int:
    stats = synth_generate(rc.gen, rc.data_seed, args.out)
    for key in ("nodes", "edges", "positives", "missing_rate"):
        print(f"{key}: {stats[key]}")
    return EXIT_OK


def cmd_prepare(args, rc: Resolved) -> int:
    ds, warnings = prepare(args.data, T=rc.model.T, seed=rc.data_seed, horizon_minutes=rc.model.horizon_minutes, ratios=rc.ratios)
    for w in warnings:
        log.warning(w)
    save_prepared(ds, args.out)
    sp = ds.split
    print(f"samples: {len(ds.samples)} (train {len(sp.train)}, val {len(sp.val)}, test {len(sp.test)})")
    return EXIT_OK


def cmd_train(args, rc: Resolved) -> int:
    ds = load_prepared(args.prepared)
    out = run_dir(args.out, rc.hash, args.run_id)
    write_config(out, rc.raw, rc.hash)

    def progress(row):
        print(f"epoch {row['epoch']:3d}  train_loss {row['train_loss']:.4f}  val_f1 {row['val_f1']:.4f}", flush=True)

    res = train(ds, rc.model, rc.train, progress=progress)
    write_history(res.history, out / "history.csv")
    save_checkpoint(out / "checkpoint.bin", rc.model, res.params)
    extra = {"config_hash": rc.hash, "best_epoch": res.best_epoch, "partition": "val", "stopping": res.criterion}
    if ds.split.val:
        write_metrics(evaluate(res.params, ds, "val", rc.model), out / "metrics.json", extra)
    print(f"run directory: {out}")
    return EXIT_OK


def _read_predictions(path):
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(f"predictions file not found: {p}")
    probs, labels = [], []
    with p.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["prediction", "label"]:
            raise IngestionError("expected header prediction,label", p, 1)
        for lineno, row in enumerate(reader, start=2):
            try:
                probs.append(float(row[0]))
                labels.append(float(row[1]))
            except (ValueError, IndexError):
                raise IngestionError(f"malformed row {row}", p, lineno) from None
    return np.array(probs), np.array(labels)


def cmd_eval(args, rc: Resolved) -> int:
    threshold = args.threshold
    if args.predictions:
        probs, labels = _read_predictions(args.predictions)
        extra = {"source": "predictions"}
    else:
        ckpt = Path(args.checkpoint)
        if ckpt.is_dir():
            ckpt = ckpt / "checkpoint.bin"
        model_cfg, params = load_checkpoint(ckpt)
        ds = load_prepared(args.prepared)
        ids = ds.split.partition(args.partition)
        probs = predict(params, ds, ids, model_cfg)
        labels = ds.labels(ids)
        extra = {"source": "checkpoint", "partition": args.partition, "model_config_hash": model_cfg.config_hash()}
    out = run_dir(args.out, rc.hash, args.run_id)
    write_config(out, rc.raw, rc.hash)
    extra["config_hash"] = rc.hash
    report = compute_metrics(probs, labels, threshold)
    if len(np.unique(labels)) < 2:
        log.warning("evaluation partition has a single class; reporting loss-based metrics only")
        payload = {k: getattr(report, k) for k in ("rmse", "mae", "mape_percent", "threshold")}
        payload.update(extra, bce=bce_value(probs, labels), warning="single-class partition")
        (out / "metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    else:
        write_metrics(report, out / "metrics.json", extra)
    for key, value in report.to_dict().items():
        print(f"{key}: {value:.6f}")
    print(f"run directory: {out}")
    return EXIT_OK


def cmd_ablate(args, rc: Resolved) -> int:
    ds = load_prepared(args.prepared)
    cells = ablation_grid(args.grid)
    out = run_dir(args.out, rc.hash, args.run_id)
    write_config(out, rc.raw, rc.hash)
    seeds = tuple(rc.train.seed + i for i in range(rc.ablation_seeds))
    results = ablate(ds, rc.model, rc.train, cells=cells, seeds=seeds, progress=lambda c: print(f"cell {c.hops}/{c.gru_depth}: {c.status}", flush=True))
    write_ablation(results, out / "ablation.csv")
    print(ablation_table(results), end="")
    print(f"run directory: {out}")
    return EXIT_OK


def cmd_cost(args, rc: Resolved) -> int:
    report = estimate_cost(rc.model, args.nodes, args.edges)
    text = report.table()
    if args.out is not None:
        out = run_dir(args.out, rc.hash, args.run_id)
        write_config(out, rc.raw, rc.hash)
        (out / "cost.txt").write_text(text, encoding="utf-8")
        (out / "cost.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(text, end="")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------
def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="JSON config file; flags override its values")
    p.add_argument("--seed", type=int, default=None, help="set the data, init and train seeds at once")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")


def _run_args(p, out_default="runs"):
    p.add_argument("--out", default=out_default, help="parent directory for the run directory")
    p.add_argument("--run-id", default=None, help="run directory name instead of timestamp-hash")


def _model_args(p):
    g = p.add_argument_group("model overrides")
    g.add_argument("--S", type=int, default=None, help="number of attention scales (config default 3)")
    g.add_argument("--H", type=int, default=None, help="attention heads (config default 4)")
    g.add_argument("--d", type=int, default=None, help="hidden width (config default 32)")
    g.add_argument("--gru-depth", type=int, default=None, help="stacked GRU layers (config default 2)")
    g.add_argument("--T", type=int, default=None, help="lookback hours (config default 24)")
    g.add_argument("--k", type=int, default=None, help="subgraph radius (config default: S)")


def _train_args(p):
    g = p.add_argument_group("training overrides")
    g.add_argument("--lr", type=float, default=None, help="Adam learning rate (config default 1e-3)")
    g.add_argument("--batch-size", type=int, default=None, help="mini-batch size (config default 32)")
    g.add_argument("--epochs", type=int, default=None, help="maximum epochs (config default 50)")
    g.add_argument("--patience", type=int, default=None, help="early-stopping patience (config default 5)")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="msgat-gru", description=__doc__, formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset bundle", formatter_class=fmt)
    _common(p)
    p.add_argument("--out", default="data", help="bundle directory")
    p.add_argument("--num-nodes", type=int, default=None, help="road segments (config default 200)")
    p.add_argument("--days", type=int, default=None, help="span in days (config default 60)")
    p.add_argument("--rule-depth", type=int, default=None, help="ring radius of the planted rule (config default 1)")
    p.add_argument("--accident-rate", type=float, default=None, help="mean hourly accident probability")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="ingest, sample, split and normalise a bundle", formatter_class=fmt)
    _common(p)
    p.add_argument("--data", default="data", help="bundle directory")
    p.add_argument("--out", default="prepared", help="prepared-store directory")
    p.add_argument("--T", type=int, default=None, help="lookback hours (config default 24)")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model on a prepared store", formatter_class=fmt)
    _common(p)
    p.add_argument("--prepared", default="prepared", help="prepared-store directory")
    _run_args(p)
    _model_args(p)
    _train_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint or a predictions file", formatter_class=fmt)
    _common(p)
    p.add_argument("--checkpoint", default=None, help="checkpoint.bin or a run directory holding one")
    p.add_argument("--prepared", default="prepared", help="prepared-store directory")
    p.add_argument("--partition", default="test", choices=("train", "val", "test"), help="partition to score")
    p.add_argument("--predictions", default=None, help="CSV with header prediction,label; skips the model")
    p.add_argument("--threshold", type=float, default=0.5, help="classification threshold")
    _run_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train the hops x GRU-depth grid", formatter_class=fmt)
    _common(p)
    p.add_argument("--prepared", default="prepared", help="prepared-store directory")
    p.add_argument("--grid", default="full", help="'full' or 'row:<hops>' with hops 1, 1-2 or 1-2-3")
    p.add_argument("--ablation-seeds", type=int, default=None, help="seeds per cell (config default 3)")
    _run_args(p)
    _model_args(p)
    _train_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("cost", help="print the closed-form compute cost", formatter_class=fmt)
    _common(p)
    p.add_argument("--nodes", type=int, required=True, help="graph size N")
    p.add_argument("--edges", type=int, required=True, help="edge count E")
    p.add_argument("--out", default=None, help="if set, also write cost.txt under a run directory here")
    p.add_argument("--run-id", default=None, help="run directory name instead of timestamp-hash")
    _model_args(p)
    p.set_defaults(func=cmd_cost)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "eval" and not args.predictions and not args.checkpoint:
            raise ConfigError("eval needs --checkpoint or --predictions")
        if args.command == "eval" and not 0 < args.threshold < 1:
            raise ConfigError(f"threshold must lie in (0, 1), got {args.threshold}")
        if args.command == "ablate":
            ablation_grid(args.grid)
        rc = Resolved(apply_overrides(load_config(args.config), args))
        return args.func(args, rc)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GenerationError as exc:
        print(f"generation failed: {exc}", file=sys.stderr)
        return EXIT_GENERATION
    except IngestionError as exc:
        print(f"ingestion error: {exc}", file=sys.stderr)
        return EXIT_INGESTION
    except (MissingArtifactError, CheckpointError) as exc:
        print(f"missing or unreadable artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
