"""Loss, optimiser, training loop with early stopping, evaluation and ablation."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import PreparedDataset
from .errors import ConfigError, ContractError, DimensionError
from .metrics import MetricReport, compute_metrics
from .model import ModelConfig, ModelParams, forward, init_params, params_from_arrays, params_to_arrays
from .tensor import Tensor, backward, clip, log

log_ = logging.getLogger(__name__)

PROB_EPS = 1e-12
HISTORY_COLUMNS = ("epoch", "train_loss", "val_rmse", "val_f1", "val_loss", "val_accuracy", "val_precision", "val_recall")


def bce_loss(probs: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped to ``[eps, 1-eps]``."""
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if y.shape != probs.shape:
        raise DimensionError(f"{probs.shape[0] if probs.ndim else 1} probabilities vs {len(y)} labels")
    p = clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    per = log(p) * y + log(1.0 - p) * (1.0 - y)
    return -per.mean()


def bce_value(probs, labels) -> float:
    p = np.clip(np.asarray(probs, float), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(labels, float)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    init_seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 0:
            raise ConfigError(f"max_epochs must be >= 0, got {self.max_epochs}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if 0 < self.max_epochs < self.patience:
            raise ConfigError(f"patience ({self.patience}) exceeds max_epochs ({self.max_epochs})")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if not self.eps > 0:
            raise ConfigError(f"eps must be > 0, got {self.eps}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(named_params, state: AdamState, config: TrainConfig) -> None:
    """One bias-corrected Adam update. Parameters with no gradient are skipped."""
    named_params = list(named_params)
    for name, t in named_params:
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            raise ContractError(f"non-finite gradient in parameter {name}")
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, t in named_params:
        g = t.grad
        if g is None:
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        t.data = t.data - config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)


def _snapshot(params: ModelParams) -> dict:
    return {k: np.array(v, copy=True) for k, v in params_to_arrays(params).items()}


def predict(params: ModelParams, dataset: PreparedDataset, ids, config: ModelConfig, batch_size: int = 64) -> np.ndarray:
    """Eval-mode probabilities for ``ids`` in the given order."""
    ids = list(ids)
    out = []
    for i in range(0, len(ids), batch_size):
        out.append(forward(dataset.batch(ids[i : i + batch_size], config), params, config).data)
    return np.concatenate(out) if out else np.zeros(0)


@dataclass
class TrainResult:
    params: ModelParams
    history: list
    best_epoch: int
    criterion: str
    warnings: list = field(default_factory=list)


def train(dataset: PreparedDataset, model_config: ModelConfig, train_config: TrainConfig, progress=None) -> TrainResult:
    """Mini-batch Adam on BCE with early stopping on validation F1.

    ``history[0]`` is the untrained model (epoch 0); later rows are one per
    epoch. When validation holds a single class F1 is uninformative and the
    stopping criterion falls back to validation loss.
    """
    params = init_params(model_config, train_config.init_seed)
    if train_config.max_epochs == 0:
        return TrainResult(params, [], 0, "none")
    rng = np.random.default_rng(train_config.seed)
    train_ids = np.array(dataset.split.train)
    val_ids = list(dataset.split.val)
    if len(train_ids) == 0:
        raise ContractError("training partition is empty")
    val_labels = dataset.labels(val_ids)
    warnings = []
    criterion = "val_f1"
    if len(val_ids) == 0 or len(np.unique(val_labels)) < 2:
        criterion = "val_loss"
        msg = "validation partition has a single class; early stopping uses validation loss"
        warnings.append(msg)
        log_.warning(msg)

    def evaluate_epoch(epoch, train_loss):
        row = {"epoch": epoch, "train_loss": train_loss}
        if val_ids:
            probs = predict(params, dataset, val_ids, model_config)
            rep = compute_metrics(probs, val_labels, model_config.threshold)
            row.update(
                val_loss=bce_value(probs, val_labels),
                val_rmse=rep.rmse,
                val_accuracy=rep.accuracy,
                val_precision=rep.precision,
                val_recall=rep.recall,
                val_f1=rep.f1,
            )
        else:
            row.update({k: math.nan for k in HISTORY_COLUMNS if k.startswith("val_")})
        return row

    def score(row):
        return row["val_f1"] if criterion == "val_f1" else -row["val_loss"]

    init_probs = predict(params, dataset, train_ids, model_config)
    history = [evaluate_epoch(0, bce_value(init_probs, dataset.labels(train_ids)))]
    best_score, best_epoch, best_state = -math.inf, 0, _snapshot(params)
    if val_ids:
        best_score = score(history[0])
    state = AdamState()
    named = list(params.named_parameters())
    stale = 0
    for epoch in range(1, train_config.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(train_ids)
        total, count = 0.0, 0
        for i in range(0, len(order), train_config.batch_size):
            ids = order[i : i + train_config.batch_size].tolist()
            batch = dataset.batch(ids, model_config)
            probs = forward(batch, params, model_config, training=True, rng=rng)
            loss = bce_loss(probs, batch.labels)
            params.zero_grad()
            backward(loss)
            adam_step(named, state, train_config)
            total += float(loss.data) * len(ids)
            count += len(ids)
        row = evaluate_epoch(epoch, total / count)
        history.append(row)
        log_.info("epoch %d: train_loss=%.4f (%.1fs)", epoch, row["train_loss"], time.perf_counter() - t0)
        if progress is not None:
            progress(row)
        s = score(row) if val_ids else -row["train_loss"]
        if s > best_score:
            best_score, best_epoch, best_state, stale = s, epoch, _snapshot(params), 0
        else:
            stale += 1
            if stale >= train_config.patience:
                break
    return TrainResult(params_from_arrays(model_config, best_state), history, best_epoch, criterion, warnings)


def evaluate(params: ModelParams, dataset: PreparedDataset, partition: str, config: ModelConfig, threshold=None) -> MetricReport:
    ids = dataset.split.partition(partition)
    probs = predict(params, dataset, ids, config)
    return compute_metrics(probs, dataset.labels(ids), config.threshold if threshold is None else threshold)


# -- artifacts -------------------------------------------------------------
def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(round(v, 10))
    return str(v)


def write_history(history, path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([_fmt(row[k]) for k in HISTORY_COLUMNS])


def write_metrics(report: MetricReport, path, extra: dict | None = None) -> None:
    payload = report.to_dict()
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- ablation ----------------------------------------------------------------
HOP_LABELS = {1: "1", 2: "1-2", 3: "1-2-3"}
ABLATION_COLUMNS = ("hops", "gru_depth", "rmse", "precision", "recall", "f1", "rmse_std", "f1_std", "status")


@dataclass
class AblationCell:
    hops: str
    gru_depth: int
    rmse: float = math.nan
    rmse_std: float = math.nan
    precision: float = math.nan
    recall: float = math.nan
    f1: float = math.nan
    f1_std: float = math.nan
    status: str = "ok"


def ablation_grid(spec: str = "full") -> list[tuple[int, int]]:
    """``full`` or ``row:<S>``; returns ``(S, depth)`` cells in table order."""
    if spec == "full":
        scales = [1, 2, 3]
    elif spec.startswith("row:"):
        label = spec[4:]
        lookup = {v: k for k, v in HOP_LABELS.items()}
        if label not in lookup:
            raise ConfigError(f"unknown ablation row {label!r}; expected one of {sorted(lookup)}")
        scales = [lookup[label]]
    else:
        raise ConfigError(f"grid must be 'full' or 'row:<hops>', got {spec!r}")
    return [(S, depth) for S in scales for depth in (1, 2, 3)]


def ablate(dataset, base: ModelConfig, train_config: TrainConfig, cells=None, seeds=(0,), progress=None) -> list[AblationCell]:
    """Train and test one model per cell and seed; metrics averaged over seeds.

    A failing cell is reported with its error and does not stop the grid.
    """
    results = []
    for S, depth in cells or ablation_grid("full"):
        cell = AblationCell(HOP_LABELS[S], depth)
        cfg = replace(base, S=S, k=S, gru_depth=depth)
        try:
            reports = []
            for seed in seeds:
                tc = replace(train_config, seed=seed, init_seed=seed)
                res = train(dataset, cfg, tc)
                reports.append(evaluate(res.params, dataset, "test", cfg))
            rm = np.array([r.rmse for r in reports])
            f1 = np.array([r.f1 for r in reports])
            cell.rmse, cell.rmse_std = float(rm.mean()), float(rm.std())
            cell.f1, cell.f1_std = float(f1.mean()), float(f1.std())
            cell.precision = float(np.mean([r.precision for r in reports]))
            cell.recall = float(np.mean([r.recall for r in reports]))
        except Exception as exc:  # noqa: BLE001 - cells fail independently
            cell.status = f"failed: {type(exc).__name__}: {exc}"
            log_.error("ablation cell hops=%s depth=%d failed: %s", cell.hops, depth, exc)
        results.append(cell)
        if progress is not None:
            progress(cell)
    return results


def write_ablation(cells, path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_COLUMNS)
        for c in cells:
            w.writerow([_fmt(getattr(c, k)) for k in ABLATION_COLUMNS])


def ablation_table(cells) -> str:
    lines = [f"{'hops':<7}{'depth':>6}{'RMSE':>16}{'P':>8}{'R':>8}{'F1':>16}"]
    for c in cells:
        if c.status != "ok":
            lines.append(f"{c.hops:<7}{c.gru_depth:>6}  {c.status}")
            continue
        lines.append(
            f"{c.hops:<7}{c.gru_depth:>6}{c.rmse:>9.4f}±{c.rmse_std:<6.4f}{c.precision:>8.4f}{c.recall:>8.4f}"
            f"{c.f1:>9.4f}±{c.f1_std:<6.4f}"
        )
    return "\n".join(lines) + "\n"
