import csv
import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SMALL_MODEL
from oracles import brute_metrics

from msgat_gru.cost import estimate_cost, linear_fit_r2
from msgat_gru.errors import ConfigError, ContractError, DimensionError
from msgat_gru.metrics import compute_metrics
from msgat_gru.model import ModelConfig, params_to_arrays
from msgat_gru.tensor import Tensor, backward
from msgat_gru.training import (
    AblationCell,
    AdamState,
    TrainConfig,
    ablate,
    ablation_grid,
    adam_step,
    bce_loss,
    evaluate,
    train,
    write_ablation,
    write_history,
)


# -- loss --------------------------------------------------------------------------
def test_bce_half_is_ln2():
    for y in (0, 1):
        assert bce_loss(Tensor([0.5]), [y]).item() == pytest.approx(math.log(2), abs=1e-15)


def test_bce_exact_prediction_near_zero():
    assert bce_loss(Tensor([1.0, 0.0]), [1, 0]).item() < 1e-11


def test_bce_matches_elementwise_oracle():
    rng = np.random.default_rng(0)
    p, y = rng.uniform(0.01, 0.99, 50), rng.integers(0, 2, 50)
    want = np.mean([-(yi * math.log(pi) + (1 - yi) * math.log(1 - pi)) for pi, yi in zip(p, y)])
    assert bce_loss(Tensor(p), y).item() == pytest.approx(want, abs=1e-12)


def test_bce_length_mismatch():
    with pytest.raises(DimensionError):
        bce_loss(Tensor([0.2, 0.3]), [1])


# -- optimiser -------------------------------------------------------------------
def test_adam_first_step_is_lr():
    cfg = TrainConfig(lr=0.01)
    x = Tensor([2.0], requires_grad=True)
    x.grad = np.array([1.0])
    adam_step([("x", x)], AdamState(), cfg)
    assert x.data[0] == pytest.approx(2.0 - 0.01, abs=1e-9)


def test_adam_zero_grad_leaves_params():
    x = Tensor([1.0, -3.0], requires_grad=True)
    x.grad = np.zeros(2)
    adam_step([("x", x)], AdamState(), TrainConfig())
    np.testing.assert_array_equal(x.data, [1.0, -3.0])


def test_adam_nan_names_parameter():
    x = Tensor([1.0], requires_grad=True)
    x.grad = np.array([np.nan])
    with pytest.raises(ContractError, match="head.W"):
        adam_step([("head.W", x)], AdamState(), TrainConfig())


def test_adam_quadratic_bowl_descends():
    x = Tensor([3.0, -2.0], requires_grad=True)
    state, cfg = AdamState(), TrainConfig(lr=0.1)
    losses = []
    for _ in range(10):
        loss = (x * x).sum()
        losses.append(loss.item())
        x.grad = None
        backward(loss)
        adam_step([("x", x)], state, cfg)
    assert all(b < a for a, b in zip(losses[1:], losses[2:]))


@pytest.mark.parametrize(
    "kwargs", [{"lr": 0}, {"batch_size": 0}, {"patience": 0}, {"max_epochs": 3, "patience": 5}, {"beta1": 1.0}]
)
def test_train_config_validation(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


# -- metrics ----------------------------------------------------------------------
def test_confusion_fixture():
    probs = [0.9, 0.8, 0.7, 0.1, 0.2, 0.1, 0.3, 0.2, 0.4, 0.0]
    labels = [1, 1, 0, 1, 0, 0, 0, 0, 0, 0]
    r = compute_metrics(probs, labels)
    assert (r.precision, r.recall, r.f1, r.accuracy) == (2 / 3, 2 / 3, 2 / 3, 0.8)


def test_perfect_predictor():
    y = np.array([0, 1, 1, 0])
    r = compute_metrics(y.astype(float), y)
    assert r.rmse == 0 and r.f1 == 1 and r.mape_percent == 0


def test_zero_denominators():
    r = compute_metrics([0.1, 0.2], [0, 0])
    assert (r.precision, r.recall, r.f1, r.accuracy) == (0.0, 0.0, 0.0, 1.0)


def test_metric_contracts():
    with pytest.raises(DimensionError):
        compute_metrics([0.1], [0, 1])
    with pytest.raises(ContractError):
        compute_metrics([], [])


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 60), st.integers(0, 10_000), st.floats(0.05, 0.95))
def test_metrics_match_brute_force(n, seed, thr):
    rng = np.random.default_rng(seed)
    p, y = rng.random(n), rng.integers(0, 2, n)
    got = compute_metrics(p, y, thr).to_dict()
    for k, v in brute_metrics(p, y, thr).items():
        assert got[k] == pytest.approx(v, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 0.98), st.floats(0.0, 0.5))
def test_recall_monotone_in_threshold(seed, t1, dt):
    rng = np.random.default_rng(seed)
    p, y = rng.random(40), rng.integers(0, 2, 40)
    t2 = min(t1 + dt, 0.99)
    assert compute_metrics(p, y, t2).recall <= compute_metrics(p, y, t1).recall


# -- cost ----------------------------------------------------------------------------
def test_cost_closed_form_example():
    r = estimate_cost(ModelConfig(S=1, H=1, d=4, T=1), N=5, E=10)
    assert (r.spatial_per_step, r.temporal) == (120, 80)
    assert r.ratio_to_baseline == 1.0


def test_cost_scaling():
    base = estimate_cost(ModelConfig(S=1, H=2, d=8, T=3), N=20, E=40)
    tri = estimate_cost(ModelConfig(S=3, H=2, d=8, T=3), N=20, E=40)
    assert tri.spatial_per_step == 3 * base.spatial_per_step
    unit = estimate_cost(ModelConfig(S=2, H=3, d=1, T=1), N=7, E=9)
    assert unit.spatial_per_step == 2 * 3 * (9 + 7)


def test_cost_rejects_nonpositive():
    with pytest.raises(ContractError):
        estimate_cost(ModelConfig(), N=0, E=5)


def test_linear_fit_r2():
    assert linear_fit_r2([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert linear_fit_r2([1, 2, 3, 4], [1, 3, 1, 3]) < 0.5


# -- training loop -------------------------------------------------------------------
FAST = TrainConfig(max_epochs=3, patience=2, batch_size=32)


def test_zero_epochs_returns_init(small_prepared):
    res = train(small_prepared, SMALL_MODEL, TrainConfig(max_epochs=0))
    from msgat_gru.model import init_params

    a, b = params_to_arrays(res.params), params_to_arrays(init_params(SMALL_MODEL, 0))
    assert res.history == [] and all(np.array_equal(a[k], b[k]) for k in a)


def test_training_is_deterministic_and_learns(small_prepared, tmp_path):
    r1 = train(small_prepared, SMALL_MODEL, FAST)
    r2 = train(small_prepared, SMALL_MODEL, FAST)
    assert r1.history == r2.history
    a, b = params_to_arrays(r1.params), params_to_arrays(r2.params)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert [row["epoch"] for row in r1.history] == list(range(len(r1.history)))
    assert r1.history[-1]["train_loss"] < r1.history[0]["train_loss"]
    write_history(r1.history, tmp_path / "h.csv")
    header = (tmp_path / "h.csv").read_text().splitlines()[0]
    assert header.startswith("epoch,train_loss,val_rmse,val_f1")


def test_best_params_restored(small_prepared):
    res = train(small_prepared, SMALL_MODEL, FAST)
    best = max(res.history, key=lambda r: r["val_f1"])
    assert res.history[res.best_epoch]["val_f1"] == best["val_f1"]
    report = evaluate(res.params, small_prepared, "val", SMALL_MODEL)
    assert report.f1 == pytest.approx(res.history[res.best_epoch]["val_f1"], abs=1e-12)


def test_single_class_validation_falls_back(small_prepared):
    ds = small_prepared
    pos_val = [i for i in ds.split.val if ds.by_id[i].label == 1]
    saved = ds.split.val
    ds.split.val = pos_val
    try:
        res = train(ds, SMALL_MODEL, TrainConfig(max_epochs=1, patience=1))
    finally:
        ds.split.val = saved
    assert res.criterion == "val_loss" and res.warnings


def test_ablation_grid_labels():
    cells = ablation_grid("full")
    assert len(cells) == 9 and cells[0] == (1, 1) and cells[-1] == (3, 3)
    assert ablation_grid("row:1-2") == [(2, 1), (2, 2), (2, 3)]
    with pytest.raises(ConfigError):
        ablation_grid("row:4")
    with pytest.raises(ConfigError):
        ablation_grid("everything")


def test_single_cell_ablation_is_train_plus_evaluate(small_prepared):
    tc = TrainConfig(max_epochs=1, patience=1)
    base = dataclasses.replace(SMALL_MODEL, S=1, k=1, gru_depth=1)
    cells = ablate(small_prepared, SMALL_MODEL, tc, cells=[(1, 1)], seeds=(0,))
    report = evaluate(train(small_prepared, base, tc).params, small_prepared, "test", base)
    assert cells[0].status == "ok" and cells[0].hops == "1"
    assert cells[0].f1 == report.f1 and cells[0].rmse == report.rmse


def test_failing_cell_is_recorded(small_prepared):
    tc = TrainConfig(max_epochs=1, patience=1)
    bad = dataclasses.replace(SMALL_MODEL, T=10_000)
    cells = ablate(small_prepared, bad, tc, cells=[(1, 1), (2, 1)], seeds=(0,))
    assert len(cells) == 2 and all(c.status.startswith("failed") for c in cells)


def test_ablation_csv_columns(tmp_path):
    cells = [AblationCell(h, d, 0.1, 0.0, 0.5, 0.5, 0.5, 0.0) for h in ("1", "1-2", "1-2-3") for d in (1, 2, 3)]
    write_ablation(cells, tmp_path / "a.csv")
    rows = list(csv.reader((tmp_path / "a.csv").open()))
    assert rows[0][:6] == ["hops", "gru_depth", "rmse", "precision", "recall", "f1"]
    assert len(rows) == 10 and rows[-1][:2] == ["1-2-3", "3"]
