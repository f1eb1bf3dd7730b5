import dataclasses
import shutil

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SMALL_MODEL
from oracles import literal_interpolate

from msgat_gru.data import (
    SCHEMA_FILES,
    AccidentRecord,
    DataStore,
    ExternalTable,
    Sample,
    SpeedSeries,
    balanced_sample,
    calendar_features,
    horizon_hours,
    ingest,
    interpolate,
    load_prepared,
    normalize,
    save_prepared,
    split,
)
from msgat_gru.errors import ConfigError, IngestionError, MissingArtifactError
from msgat_gru.graph import STATIC_COLUMNS, RoadGraph, build_adjacency


def make_store(rng, n=6, hours=24 * 10, road_types=None):
    edges = [(i, i + 1) for i in range(n - 1)]
    static = rng.normal(size=(n, len(STATIC_COLUMNS)))
    static[:, 0] = road_types if road_types is not None else rng.integers(0, 3, n)
    g = RoadGraph(n, edges, static)
    values = rng.normal(50, 10, size=(n, hours, 3))
    speeds = SpeedSeries(values, np.zeros((n, hours), bool), 400_000)
    return DataStore(g, build_adjacency(g), speeds, ExternalTable(rng.normal(size=(hours, 5)), 400_000), [])


def accidents_at(store, pairs):
    return [AccidentRecord(seg, (store.start_hour + t) * 60 + 7, 1, 0) for seg, t in pairs]


# -- ingestion ---------------------------------------------------------------
def test_ingest_synth_bundle(small_bundle):
    root, stats = small_bundle
    store = ingest(root)
    assert store.graph.num_nodes == stats["nodes"]
    assert store.graph.num_edges == stats["edges"]
    assert len(store.accidents) == stats["positives"]
    assert store.num_hours == stats["hours"]
    assert store.speeds.missing.mean() == pytest.approx(stats["missing_rate"])
    assert np.all((store.speeds.values[..., 2] >= 0) & (store.speeds.values[..., 2] <= 1))


def _copy(src, tmp_path):
    dst = tmp_path / "b"
    shutil.copytree(src, dst)
    return dst


def test_ingest_missing_file(small_bundle, tmp_path):
    root = _copy(small_bundle[0], tmp_path)
    (root / "weather.csv").unlink()
    with pytest.raises(IngestionError, match="weather.csv"):
        ingest(root)


def test_ingest_unknown_segment_names_id_and_line(small_bundle, tmp_path):
    root = _copy(small_bundle[0], tmp_path)
    with (root / "accidents.csv").open("a") as fh:
        fh.write("9999,0,1,0\n")
    lines = (root / "accidents.csv").read_text().count("\n")
    with pytest.raises(IngestionError, match=rf"accidents.csv:{lines}: unknown segment_id 9999"):
        ingest(root)


def test_ingest_malformed_row(small_bundle, tmp_path):
    root = _copy(small_bundle[0], tmp_path)
    text = (root / "speeds.csv").read_text().splitlines()
    text[2] = "0,abc,1,2,0.1"
    (root / "speeds.csv").write_text("\n".join(text) + "\n")
    with pytest.raises(IngestionError, match="speeds.csv:3"):
        ingest(root)


def test_calendar_features():
    # 2018-08-04 00:00 UTC is a Saturday
    hour = int(np.datetime64("2018-08-04T00", "h").astype(np.int64))
    import datetime as dt

    feats = calendar_features(hour, 25, frozenset({dt.date(2018, 8, 5)}))
    np.testing.assert_array_equal(feats[0], [0, 5, 1, 0])
    np.testing.assert_array_equal(feats[24], [0, 6, 1, 1])


# -- interpolation -------------------------------------------------------------
def test_interpolate_no_gaps_identity():
    rng = np.random.default_rng(0)
    s = SpeedSeries(rng.normal(size=(2, 48, 3)), np.zeros((2, 48), bool), 0)
    np.testing.assert_array_equal(interpolate(s).values, s.values)


def test_interpolate_two_neighbours_mean():
    values = np.zeros((1, 24 * 3, 3))
    missing = np.ones((1, 24 * 3), bool)
    values[0, 5], values[0, 24 * 2 + 5] = 40, 60
    missing[0, 5] = missing[0, 24 * 2 + 5] = False
    out = interpolate(SpeedSeries(values, missing, 0))
    np.testing.assert_allclose(out.values[0, 24 + 5], 50)
    assert out.missing[0, 24 + 5]


def test_interpolate_empty_raises():
    with pytest.raises(IngestionError):
        interpolate(SpeedSeries(np.zeros((2, 5, 3)), np.ones((2, 5), bool), 0))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.1, 0.4, 0.9]))
def test_interpolate_matches_literal_oracle(seed, gap):
    rng = np.random.default_rng(seed)
    n, hours = 3, 24 * 20
    values = rng.normal(50, 10, size=(n, hours, 3))
    missing = rng.random((n, hours)) < gap
    missing[rng.integers(n), : hours // 2] = True  # long outage pushes into later rules
    if rng.random() < 0.3:
        missing[rng.integers(n)] = True  # a segment with nothing observed
    if missing.all():
        missing[0, 0] = False
    out = interpolate(SpeedSeries(values, missing, 0))
    np.testing.assert_allclose(out.values, literal_interpolate(values, missing), rtol=1e-12, atol=1e-9)
    assert np.isfinite(out.values).all()
    np.testing.assert_array_equal(out.missing, missing)


# -- balanced sampling ---------------------------------------------------------
def test_balanced_sample_one_to_one_and_deterministic():
    rng = np.random.default_rng(1)
    store = make_store(rng)
    accs = accidents_at(store, [(i % 6, 30 + 7 * i) for i in range(10)])
    samples, warnings = balanced_sample(accs, store, T=24, seed=3)
    assert len(samples) == 20 and sum(s.label for s in samples) == 10
    assert warnings == []
    again, _ = balanced_sample(accs, store, T=24, seed=3)
    assert samples == again


def test_negatives_avoid_accident_windows():
    rng = np.random.default_rng(2)
    store = make_store(rng, n=3, hours=60)
    accs = accidents_at(store, [(0, 30), (0, 40), (1, 35)])
    samples, _ = balanced_sample(accs, store, T=24, seed=0)
    reach = horizon_hours(60)
    for s in samples:
        if s.label == 0:
            for a in accs:
                assert not (s.center == a.segment_id and abs(s.hour - (a.epoch_hour - store.start_hour)) <= reach)
            assert s.hour >= 24


def test_negatives_follow_road_type():
    rng = np.random.default_rng(3)
    store = make_store(rng, n=8, road_types=[0, 1, 2, 2, 0, 2, 1, 0])
    accs = accidents_at(store, [(2, 50), (3, 60), (5, 70), (2, 90)])
    samples, warnings = balanced_sample(accs, store, T=24, seed=0)
    negs = [s for s in samples if s.label == 0]
    assert all(store.graph.static_attrs[s.center, 0] == 2 for s in negs)
    assert warnings == []


def test_stratum_deficit_falls_back_with_warning():
    rng = np.random.default_rng(4)
    store = make_store(rng, n=3, hours=30, road_types=[1, 0, 0])
    # six hours of history window remain for segment 0 -> type-1 stratum runs dry
    accs = accidents_at(store, [(0, 25), (0, 26), (0, 27), (0, 28), (0, 29), (0, 24)])
    samples, warnings = balanced_sample(accs, store, T=24, seed=0)
    assert sum(1 for s in samples if s.label == 0) == 6
    assert any("road type 1" in w for w in warnings)


def test_short_history_accident_skipped():
    rng = np.random.default_rng(5)
    store = make_store(rng)
    accs = accidents_at(store, [(0, 3), (1, 50)])
    samples, warnings = balanced_sample(accs, store, T=24, seed=0)
    assert len(samples) == 2 and len(warnings) == 1


# -- split ---------------------------------------------------------------------
def fake_samples(n, pos):
    return [Sample(i, 0, 30, int(i < pos), "x") for i in range(n)]


@pytest.mark.parametrize("n, sizes", [(100, (70, 10, 20)), (10, (7, 1, 2))])
def test_split_sizes(n, sizes):
    sp = split(fake_samples(n, n // 2), seed=0)
    assert (len(sp.train), len(sp.val), len(sp.test)) == sizes
    ids = sp.train + sp.val + sp.test
    assert sorted(ids) == list(range(n))


def test_split_contracts():
    with pytest.raises(ConfigError):
        split(fake_samples(20, 10), ratios=(0.5, 0.2, 0.2))
    with pytest.raises(ConfigError):
        split(fake_samples(9, 4))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000), st.integers(5, 80))
def test_split_label_parity(seed, half):
    samples = fake_samples(2 * half, half)
    sp = split(samples, seed=seed)
    for part in (sp.train, sp.val, sp.test):
        pos = sum(samples[i].label for i in part)
        assert abs(2 * pos - len(part)) <= 1


# -- normalisation ---------------------------------------------------------------
def test_normalize_uses_only_training_rows():
    rng = np.random.default_rng(6)
    store = make_store(rng)
    samples = [Sample(i, i % 6, 30 + 10 * i, i % 2, "x") for i in range(20)]
    train_ids = list(range(10))
    stats = normalize(store, samples, train_ids, T=24)
    # overwrite every (segment, hour) not touched by a training window and all test samples
    touched = np.zeros(store.speeds.values.shape[:2], bool)
    train_hours = set()
    for s in samples[:10]:
        touched[s.center, s.hour - 24 : s.hour] = True
        train_hours.add(s.hour)
    store.speeds.values[~touched] = rng.normal(size=((~touched).sum(), 3)) * 1e3
    keep = sorted(train_hours)
    w = store.external.weather.copy()
    store.external.weather[:] = rng.normal(size=w.shape) * 1e3
    store.external.weather[keep] = w[keep]
    moved = [dataclasses.replace(s, center=(s.center + 1) % 6, hour=s.hour + 3) for s in samples[10:]]
    again = normalize(store, samples[:10] + moved, train_ids, T=24)
    for k, v in stats.__dict__.items():
        np.testing.assert_array_equal(v, getattr(again, k))


def test_normalize_analytic_values():
    rng = np.random.default_rng(7)
    store = make_store(rng, n=2)
    store.graph.static_attrs[:, 1] = [0.0, 2.0]
    store.graph.static_attrs[:, 2] = 5.0
    samples = [Sample(0, 0, 30, 1, "x"), Sample(1, 1, 40, 0, "x")]
    st_ = normalize(store, samples, [0, 1], T=24)
    z = type(st_).apply(store.graph.static_attrs, st_.spatial_mean, st_.spatial_std)
    np.testing.assert_allclose(z[:, 1], [-1, 1])
    np.testing.assert_array_equal(z[:, 2], 0.0)


def test_prepared_train_moments(small_prepared):
    ds = small_prepared
    train = [ds.by_id[i] for i in ds.split.train]
    centers = np.array([s.center for s in train])
    z = ds.static[centers]
    std = ds.split.stats.spatial_std
    np.testing.assert_allclose(z.mean(0), 0, atol=1e-9)
    np.testing.assert_allclose(z.std(0)[std > 0], 1, atol=1e-9)


# -- prepared store --------------------------------------------------------------
def test_prepared_round_trip(small_prepared, tmp_path):
    save_prepared(small_prepared, tmp_path / "p")
    back = load_prepared(tmp_path / "p")
    assert back.samples == small_prepared.samples
    assert back.split.train == small_prepared.split.train
    np.testing.assert_array_equal(back.speeds, small_prepared.speeds)
    np.testing.assert_array_equal(back.external, small_prepared.external)
    b1 = back.batch(back.split.test[:3], SMALL_MODEL)
    b2 = small_prepared.batch(small_prepared.split.test[:3], SMALL_MODEL)
    for x, y in zip(b1.temporal_x, b2.temporal_x):
        np.testing.assert_array_equal(x, y)


def test_load_prepared_missing(tmp_path):
    with pytest.raises(MissingArtifactError):
        load_prepared(tmp_path)


def test_batch_shapes_and_centre_flag(small_prepared):
    ds = small_prepared
    batch = ds.batch(ds.split.train[:4], SMALL_MODEL)
    for sg, xs, xt in zip(batch.subgraphs, batch.spatial_x, batch.temporal_x):
        assert xs.shape == (sg.num_nodes, SMALL_MODEL.spatial_dim)
        assert xt.shape == (SMALL_MODEL.T, sg.num_nodes, SMALL_MODEL.temporal_dim)
        assert xs[:, -1].sum() == 1 and xs[sg.center_local, -1] == 1
    assert batch.external_x.shape == (4, 9)


def test_bundle_has_exact_schema_files(small_bundle):
    root = small_bundle[0]
    assert sorted(p.name for p in root.iterdir()) == sorted(SCHEMA_FILES)
