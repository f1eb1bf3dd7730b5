"""Dataset ingestion, gap filling, normalisation, balanced sampling and splits.

All time indices are integer hours.  A store covers ``num_hours`` consecutive
hours starting at ``start_hour`` (hours since the Unix epoch); arrays are
indexed by offset from the start.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, IngestionError, MissingArtifactError, SamplingError
from .graph import STATIC_COLUMNS, RoadGraph, SparseAdjacency, Subgraph, build_adjacency, khop_subgraph, read_edge_list
from .model import ModelConfig, SampleBatch

log = logging.getLogger(__name__)

SCHEMA_FILES = ("graph.txt", "segments.csv", "speeds.csv", "weather.csv", "accidents.csv", "holidays.txt")
SEGMENT_HEADER = ("segment_id",) + STATIC_COLUMNS
SPEED_HEADER = ("segment_id", "epoch_hour", "avg_speed", "veh_count", "occupancy")
WEATHER_HEADER = ("epoch_hour", "temp_c", "precip_mm", "visibility_km", "wind_kmh", "event_code")
ACCIDENT_HEADER = ("segment_id", "epoch_minute", "severity", "incident_type")
SPEED_CHANNELS = ("avg_speed", "veh_count", "occupancy")
EXTERNAL_COLUMNS = WEATHER_HEADER[1:] + ("hour_of_day", "day_of_week", "is_weekend", "is_holiday")
ROAD_TYPE_COL = STATIC_COLUMNS.index("road_type")
DAY = 24


@dataclass(frozen=True)
class AccidentRecord:
    segment_id: int
    epoch_minute: int
    severity: int
    incident_type: int

    @property
    def epoch_hour(self) -> int:
        return self.epoch_minute // 60


@dataclass
class SpeedSeries:
    """Hourly traffic measurements for every segment.

    ``values`` is ``(num_segments, num_hours, 3)``; ``missing`` flags buckets
    with no observation.  After :func:`interpolate` the values are complete
    but ``missing`` is kept as an audit trail.
    """

    values: np.ndarray
    missing: np.ndarray
    start_hour: int

    @property
    def num_hours(self) -> int:
        return self.values.shape[1]


@dataclass
class ExternalTable:
    """Weather readings per hour plus the holiday calendar."""

    weather: np.ndarray
    start_hour: int
    holidays: frozenset = frozenset()

    def features(self) -> np.ndarray:
        """``(num_hours, 9)``: weather columns then calendar columns."""
        return np.concatenate([self.weather, calendar_features(self.start_hour, len(self.weather), self.holidays)], axis=1)


def calendar_features(start_hour: int, num_hours: int, holidays=frozenset()) -> np.ndarray:
    out = np.zeros((num_hours, 4))
    for t in range(num_hours):
        stamp = dt.datetime(1970, 1, 1) + dt.timedelta(hours=start_hour + t)
        dow = stamp.weekday()
        out[t] = (stamp.hour, dow, float(dow >= 5), float(stamp.date() in holidays))
    return out


@dataclass
class DataStore:
    graph: RoadGraph
    adjacency: SparseAdjacency
    speeds: SpeedSeries
    external: ExternalTable
    accidents: list
    _subgraphs: dict = field(default_factory=dict, repr=False)

    @property
    def start_hour(self) -> int:
        return self.speeds.start_hour

    @property
    def num_hours(self) -> int:
        return self.speeds.num_hours

    def subgraph(self, center: int, k: int) -> Subgraph:
        key = (int(center), int(k))
        if key not in self._subgraphs:
            self._subgraphs[key] = khop_subgraph(self.graph, self.adjacency, center, k)
        return self._subgraphs[key]


# -- ingestion -----------------------------------------------------------
def _rows(path: Path, header: tuple):
    if not path.exists():
        raise IngestionError("file not found", path)
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None or tuple(c.strip() for c in first) != header:
            raise IngestionError(f"expected header {','.join(header)}", path, 1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestionError(f"expected {len(header)} fields, got {len(row)}", path, lineno)
            yield lineno, row


def _parse(path, lineno, row, types):
    try:
        return [t(v) for t, v in zip(types, row)]
    except ValueError:
        raise IngestionError(f"malformed value in row {row}", path, lineno) from None


def read_holidays(path: Path) -> frozenset:
    if not path.exists():
        raise IngestionError("file not found", path)
    days = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            days.add(dt.date.fromisoformat(line))
        except ValueError:
            raise IngestionError(f"expected YYYY-MM-DD, got {line!r}", path, lineno) from None
    return frozenset(days)


def ingest(root) -> DataStore:
    """Read the six schema files under ``root`` into a cross-referenced store."""
    root = Path(root)
    for name in SCHEMA_FILES:
        if not (root / name).exists():
            raise IngestionError("file not found", root / name)
    n, edges = read_edge_list(root / "graph.txt")

    path = root / "segments.csv"
    static = np.full((n, len(STATIC_COLUMNS)), np.nan)
    for lineno, row in _rows(path, SEGMENT_HEADER):
        vals = _parse(path, lineno, row, [int] + [float] * len(STATIC_COLUMNS))
        seg = vals[0]
        if not 0 <= seg < n:
            raise IngestionError(f"unknown segment_id {seg}", path, lineno)
        static[seg] = vals[1:]
    absent = np.flatnonzero(np.isnan(static).any(axis=1))
    if len(absent):
        raise IngestionError(f"segments without attributes: {absent[:10].tolist()}", path)
    graph = RoadGraph(n, edges, static)
    adjacency = build_adjacency(graph)

    path = root / "weather.csv"
    weather_rows = {}
    for lineno, row in _rows(path, WEATHER_HEADER):
        vals = _parse(path, lineno, row, [int] + [float] * 5)
        weather_rows[vals[0]] = vals[1:]
    if not weather_rows:
        raise IngestionError("no weather rows; cannot establish the hourly grid", path)
    start = min(weather_rows)
    num_hours = max(weather_rows) - start + 1
    gaps = [h for h in range(start, start + num_hours) if h not in weather_rows]
    if gaps:
        raise IngestionError(f"weather missing for {len(gaps)} hours, first epoch_hour {gaps[0]}", path)
    weather = np.array([weather_rows[h] for h in range(start, start + num_hours)])

    path = root / "speeds.csv"
    values = np.zeros((n, num_hours, 3))
    missing = np.ones((n, num_hours), dtype=bool)
    for lineno, row in _rows(path, SPEED_HEADER):
        seg, hour, speed, count, occ = _parse(path, lineno, row, [int, int, float, float, float])
        if not 0 <= seg < n:
            raise IngestionError(f"unknown segment_id {seg}", path, lineno)
        t = hour - start
        if not 0 <= t < num_hours:
            raise IngestionError(f"epoch_hour {hour} outside the weather grid", path, lineno)
        if not 0.0 <= occ <= 1.0:
            raise IngestionError(f"occupancy {occ} outside [0, 1]", path, lineno)
        values[seg, t] = (speed, count, occ)
        missing[seg, t] = False

    path = root / "accidents.csv"
    accidents = []
    for lineno, row in _rows(path, ACCIDENT_HEADER):
        seg, minute, severity, kind = _parse(path, lineno, row, [int, int, int, int])
        if not 0 <= seg < n:
            raise IngestionError(f"unknown segment_id {seg}", path, lineno)
        if not 0 <= minute // 60 - start < num_hours:
            raise IngestionError(f"epoch_minute {minute} outside dataset span", path, lineno)
        accidents.append(AccidentRecord(seg, minute, severity, kind))

    holidays = read_holidays(root / "holidays.txt")
    return DataStore(graph, adjacency, SpeedSeries(values, missing, start), ExternalTable(weather, start, holidays), accidents)


# -- interpolation -------------------------------------------------------
def _same_hour_mean(values, observed, offsets_days):
    """Mean of observed same-hour values at the given day offsets (both signs)."""
    n, h, c = values.shape
    total = np.zeros_like(values)
    count = np.zeros((n, h))
    for k in offsets_days:
        for shift in (k * DAY, -k * DAY):
            if abs(shift) >= h:
                continue
            src = slice(max(shift, 0), h + min(shift, 0))
            dst = slice(max(-shift, 0), h + min(-shift, 0))
            obs = observed[:, src]
            total[:, dst] += values[:, src] * obs[..., None]
            count[:, dst] += obs
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = total / count[..., None]
    return mean, count > 0


def interpolate(series: SpeedSeries) -> SpeedSeries:
    """Fill missing buckets by escalating rules.

    1. mean of observed same-hour values 1..7 days away,
    2. otherwise 8..14 days away,
    3. otherwise the segment's mean over all observed hours,
    4. otherwise the global mean.

    Offsets falling outside the series are skipped.  Only originally
    observed values feed any rule.
    """
    values, missing = series.values, series.missing
    observed = ~missing
    if not observed.any():
        raise IngestionError("cannot interpolate: no speed observations at all")
    out = np.where(observed[..., None], values, 0.0)
    todo = missing.copy()
    for window in (range(1, 8), range(8, 15)):
        mean, ok = _same_hour_mean(out * 1.0, observed, window)
        use = todo & ok
        out[use] = mean[use]
        todo &= ~use
    if todo.any():
        seg_count = observed.sum(axis=1)
        seg_sum = (np.where(observed[..., None], values, 0.0)).sum(axis=1)
        global_mean = seg_sum.sum(axis=0) / seg_count.sum()
        with np.errstate(invalid="ignore", divide="ignore"):
            seg_mean = np.where(seg_count[:, None] > 0, seg_sum / np.maximum(seg_count, 1)[:, None], global_mean)
        rows, cols = np.nonzero(todo)
        out[rows, cols] = seg_mean[rows]
    return SpeedSeries(out, missing.copy(), series.start_hour)


# -- samples, sampling and splitting ------------------------------------
@dataclass(frozen=True)
class Sample:
    """One labelled (centre segment, prediction hour) instance.

    ``hour`` is the offset into the store's grid; the lookback window is
    ``[hour - T, hour)`` and external features are read at ``hour``.
    """

    sample_id: int
    center: int
    hour: int
    label: int
    provenance: str


def horizon_hours(horizon_minutes: int) -> int:
    return max(1, -(-horizon_minutes // 60))


def balanced_sample(accidents, store: DataStore, T: int, seed: int, horizon_minutes: int = 60):
    """One positive per accident plus an equal number of road-type-matched negatives.

    Returns ``(samples, warnings)``.  Accidents without ``T`` hours of
    history are skipped with a warning.  Negatives are (segment, hour) pairs
    with no accident on that segment within the horizon; each road-type
    stratum receives as many negatives as it has positives, any shortfall
    being drawn from the other strata.
    """
    warnings = []
    rng = np.random.default_rng(seed)
    start, num_hours = store.start_hour, store.num_hours
    reach = horizon_hours(horizon_minutes)
    blocked = {}
    for acc in accidents:
        t = acc.epoch_hour - start
        for dt_ in range(-reach, reach + 1):
            blocked.setdefault(acc.segment_id, set()).add(t + dt_)

    positives = []
    for i, acc in enumerate(accidents):
        t = acc.epoch_hour - start
        if t < T or t >= num_hours:
            warnings.append(f"accident {i} on segment {acc.segment_id} at hour {t} lacks {T}h of history; skipped")
            continue
        positives.append((acc.segment_id, t, f"accident:{i}"))
    if not positives:
        raise SamplingError("no usable accidents to build positive samples from")

    road_type = store.graph.static_attrs[:, ROAD_TYPE_COL].astype(int)
    eligible = np.arange(T, num_hours)
    quotas = {}
    for seg, _, _ in positives:
        quotas[road_type[seg]] = quotas.get(road_type[seg], 0) + 1

    taken = set()
    taken_per_seg = {}

    def capacity(seg):
        bad = sum(1 for h in blocked.get(seg, ()) if T <= h < num_hours)
        return len(eligible) - bad - taken_per_seg.get(seg, 0)

    def take(seg, h):
        taken.add((seg, h))
        taken_per_seg[seg] = taken_per_seg.get(seg, 0) + 1

    def draw(segments, count):
        """Uniform draw of ``count`` free (segment, hour) pairs from ``segments``."""
        segments = [int(s) for s in segments]
        picked = []
        if not segments or count <= 0:
            return picked
        if sum(capacity(s) for s in segments) <= count:
            for seg in segments:
                bad = blocked.get(seg, set())
                for h in eligible.tolist():
                    if h not in bad and (seg, h) not in taken:
                        picked.append((seg, h))
            for pair in picked:
                take(*pair)
            return picked
        while len(picked) < count:
            seg = segments[rng.integers(len(segments))]
            h = int(eligible[rng.integers(len(eligible))])
            if h in blocked.get(seg, ()) or (seg, h) in taken:
                continue
            take(seg, h)
            picked.append((seg, h))
        return picked

    negatives, deficit = [], 0
    for rt in sorted(quotas):
        want = quotas[rt]
        got = draw(np.flatnonzero(road_type == rt), want)
        negatives += got
        if len(got) < want:
            deficit += want - len(got)
            warnings.append(f"road type {rt}: only {len(got)} of {want} negatives available; drawing the rest unstratified")
    if deficit:
        extra = draw(np.arange(store.graph.num_nodes), deficit)
        if len(extra) < deficit:
            raise SamplingError(f"not enough negative candidates: short by {deficit - len(extra)}")
        negatives += extra

    samples = []
    for seg, t, prov in positives:
        samples.append(Sample(len(samples), int(seg), int(t), 1, prov))
    for seg, t in negatives:
        samples.append(Sample(len(samples), int(seg), int(t), 0, f"negative:{seg}:{t}"))
    for w in warnings:
        log.warning(w)
    return samples, warnings


def _largest_remainder(total: int, ratios) -> list[int]:
    raw = [total * r for r in ratios]
    counts = [int(np.floor(x)) for x in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    stats: "NormStats | None" = None

    def partition(self, name: str) -> list:
        return {"train": self.train, "val": self.val, "test": self.test}[name]


def split(samples, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> DatasetSplit:
    """Label-stratified shuffle split; returns sample ids per partition."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    if len(samples) < 10:
        raise ConfigError(f"need at least 10 samples to split, got {len(samples)}")
    rng = np.random.default_rng(seed)
    sizes = _largest_remainder(len(samples), ratios)
    pos = [s.sample_id for s in samples if s.label == 1]
    neg = [s.sample_id for s in samples if s.label != 1]
    pos = [pos[i] for i in rng.permutation(len(pos))]
    neg = [neg[i] for i in rng.permutation(len(neg))]
    pos_sizes = _largest_remainder(len(pos), [s / len(samples) for s in sizes])
    parts, pi, ni = [], 0, 0
    for size, npos in zip(sizes, pos_sizes):
        npos = min(npos, size)
        nneg = size - npos
        part = pos[pi : pi + npos] + neg[ni : ni + nneg]
        pi, ni = pi + npos, ni + nneg
        parts.append([part[i] for i in rng.permutation(len(part))])
    return DatasetSplit(*parts)


# -- normalisation -------------------------------------------------------
@dataclass
class NormStats:
    """Per-feature mean/std for the three feature groups (population std)."""

    spatial_mean: np.ndarray
    spatial_std: np.ndarray
    temporal_mean: np.ndarray
    temporal_std: np.ndarray
    external_mean: np.ndarray
    external_std: np.ndarray

    @staticmethod
    def apply(x, mean, std):
        safe = np.where(std > 0, std, 1.0)
        return np.where(std > 0, (x - mean) / safe, 0.0)

    def to_dict(self) -> dict:
        return {k: v.tolist() for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})


def zscore_fit(rows: np.ndarray):
    rows = np.asarray(rows, dtype=np.float64)
    return rows.mean(axis=0), rows.std(axis=0)


def normalize(store: DataStore, samples, train_ids, T: int) -> NormStats:
    """Fit z-score statistics on training samples only.

    Spatial rows are the training centres' static attributes, temporal rows
    their lookback windows, external rows their prediction hours.
    """
    by_id = {s.sample_id: s for s in samples}
    train = [by_id[i] for i in train_ids]
    if not train:
        raise ConfigError("cannot fit normalisation on an empty training partition")
    centers = np.array([s.center for s in train])
    hours = np.array([s.hour for s in train])
    spatial = store.graph.static_attrs[centers]
    window = hours[:, None] + np.arange(-T, 0)[None, :]
    temporal = store.speeds.values[centers[:, None], window].reshape(-1, 3)
    external = store.external.features()[hours]
    s_mean, s_std = zscore_fit(spatial)
    t_mean, t_std = zscore_fit(temporal)
    e_mean, e_std = zscore_fit(external)
    return NormStats(s_mean, s_std, t_mean, t_std, e_mean, e_std)


# -- batching ------------------------------------------------------------
class PreparedDataset:
    """Interpolated store plus samples, split and normalised feature arrays."""

    def __init__(self, store: DataStore, samples, split_: DatasetSplit):
        if split_.stats is None:
            raise ConfigError("split has no normalisation statistics")
        self.store = store
        self.samples = list(samples)
        self.split = split_
        self.by_id = {s.sample_id: s for s in self.samples}
        st = split_.stats
        self.static = NormStats.apply(store.graph.static_attrs, st.spatial_mean, st.spatial_std)
        self.speeds = NormStats.apply(store.speeds.values, st.temporal_mean, st.temporal_std)
        self.external = NormStats.apply(store.external.features(), st.external_mean, st.external_std)

    def labels(self, ids) -> np.ndarray:
        return np.array([self.by_id[i].label for i in ids], dtype=np.float64)

    def batch(self, ids, config: ModelConfig) -> SampleBatch:
        subgraphs, spatial, temporal, external, labels = [], [], [], [], []
        for i in ids:
            s = self.by_id[i]
            if s.hour < config.T:
                raise ConfigError(f"sample {i} has only {s.hour} hours of history, model needs T={config.T}")
            sg = self.store.subgraph(s.center, config.k)
            flag = np.zeros((sg.num_nodes, 1))
            flag[sg.center_local] = 1.0
            spatial.append(np.concatenate([self.static[sg.nodes], flag], axis=1))
            window = self.speeds[sg.nodes, s.hour - config.T : s.hour].transpose(1, 0, 2)
            temporal.append(np.concatenate([window, np.broadcast_to(flag, (config.T, sg.num_nodes, 1))], axis=2))
            external.append(self.external[s.hour])
            labels.append(s.label)
            subgraphs.append(sg)
        ext = np.array(external).reshape(len(ids), -1)
        return SampleBatch(subgraphs, spatial, temporal, ext, labels)


def prepare(root, T: int = 24, seed: int = 0, horizon_minutes: int = 60, ratios=(0.7, 0.1, 0.2)):
    """ingest -> interpolate -> balanced_sample -> split -> normalize."""
    store = ingest(root)
    store.speeds = interpolate(store.speeds)
    samples, warnings = balanced_sample(store.accidents, store, T, seed, horizon_minutes)
    parts = split(samples, ratios, seed)
    parts.stats = normalize(store, samples, parts.train, T)
    return PreparedDataset(store, samples, parts), warnings


# -- prepared-store persistence -------------------------------------------
def save_prepared(ds: PreparedDataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    store = ds.store
    with (out / "store.npy").open("wb") as fh:
        for arr in (
            np.array([store.graph.num_nodes, store.start_hour, store.num_hours], dtype=np.int64),
            store.graph.edges,
            store.graph.static_attrs,
            store.speeds.values,
            store.speeds.missing,
            store.external.weather,
            np.array(sorted(d.toordinal() for d in store.external.holidays), dtype=np.int64),
        ):
            np.save(fh, arr, allow_pickle=False)
    with (out / "samples.csv").open("w", encoding="utf-8", newline="") as fh:
        fh.write("sample_id,center,hour,label,provenance\n")
        for s in ds.samples:
            fh.write(f"{s.sample_id},{s.center},{s.hour},{s.label},{s.provenance}\n")
    manifest = {"train": ds.split.train, "val": ds.split.val, "test": ds.split.test}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    (out / "norm_stats.json").write_text(json.dumps(ds.split.stats.to_dict(), indent=1) + "\n", encoding="utf-8")


def load_prepared(prep_dir) -> PreparedDataset:
    prep = Path(prep_dir)
    for name in ("store.npy", "samples.csv", "manifest.json", "norm_stats.json"):
        if not (prep / name).exists():
            raise MissingArtifactError(f"prepared artifact not found: {prep / name}")
    with (prep / "store.npy").open("rb") as fh:
        head = np.load(fh)
        edges, static, values, missing, weather, hol = (np.load(fh) for _ in range(6))
    n, start, _ = (int(v) for v in head)
    graph = RoadGraph(n, edges, static)
    holidays = frozenset(dt.date.fromordinal(int(o)) for o in hol)
    store = DataStore(graph, build_adjacency(graph), SpeedSeries(values, missing, start), ExternalTable(weather, start, holidays), [])
    samples = []
    for lineno, row in _rows(prep / "samples.csv", ("sample_id", "center", "hour", "label", "provenance")):
        sid, c, h, y = _parse(prep / "samples.csv", lineno, row[:4], [int, int, int, int])
        samples.append(Sample(sid, c, h, y, row[4]))
    manifest = json.loads((prep / "manifest.json").read_text(encoding="utf-8"))
    stats = NormStats.from_dict(json.loads((prep / "norm_stats.json").read_text(encoding="utf-8")))
    return PreparedDataset(store, samples, DatasetSplit(manifest["train"], manifest["val"], manifest["test"], stats))
