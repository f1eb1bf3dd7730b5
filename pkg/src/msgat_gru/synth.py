"""Synthetic dataset bundles in the ingestion schema, with a planted risk rule.

Accident probability at (segment, hour) grows with three signals measured
one hour earlier or at the hour itself:

* low speed on the segment (previous hour),
* low mean speed over the ring of segments exactly ``rule_depth`` hops away
  (previous hour),
* adverse weather (current hour).

A model therefore needs ``rule_depth``-hop context to fit the rule well.
Pass ``audit_dir`` to also save the standardised risk score, kept outside
the bundle so the bundle holds exactly the six schema files.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components, minimum_spanning_tree
from scipy.spatial import Delaunay

from .errors import ConfigError, GenerationError
from .graph import RoadGraph, build_adjacency, bfs_distances, write_edge_list

ROAD_TYPE_PROBS = (0.15, 0.3, 0.35, 0.2)
SPEED_LIMITS = (70.0, 60.0, 50.0, 40.0)
BASE_LANES = (4, 3, 2, 1)
HOLIDAYS = ("2018-09-24", "2018-10-01", "2018-10-02", "2018-10-03", "2018-10-04", "2018-10-05")
MAX_ATTEMPTS = 100


@dataclass(frozen=True)
class GenConfig:
    num_nodes: int = 200
    mean_degree: float = 3.0
    span_days: int = 60
    accident_rate: float = 0.0014
    missing_rate: float = 0.05
    rule_depth: int = 1
    risk_gain: float = 3.5
    speed_weight: float = 1.0
    ring_weight: float = 1.5
    weather_weight: float = 0.75
    min_history_hours: int = 24
    start_date: str = "2018-08-01"

    def __post_init__(self):
        if self.num_nodes < 2:
            raise ConfigError(f"num_nodes must be >= 2, got {self.num_nodes}")
        if not 1.0 <= self.mean_degree <= 6.0:
            raise ConfigError(f"mean_degree must lie in [1, 6], got {self.mean_degree}")
        if self.span_days < 1:
            raise ConfigError(f"span_days must be >= 1, got {self.span_days}")
        if not 0.0 <= self.accident_rate <= 1.0:
            raise ConfigError(f"accident_rate must lie in [0, 1], got {self.accident_rate}")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ConfigError(f"missing_rate must lie in [0, 1), got {self.missing_rate}")
        if self.rule_depth not in (1, 2, 3):
            raise ConfigError(f"rule_depth must be 1, 2 or 3, got {self.rule_depth}")
        if self.min_history_hours < 1:
            raise ConfigError(f"min_history_hours must be >= 1, got {self.min_history_hours}")
        try:
            dt.date.fromisoformat(self.start_date)
        except ValueError:
            raise ConfigError(f"start_date must be YYYY-MM-DD, got {self.start_date!r}") from None

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _road_edges(rng, n: int, mean_degree: float) -> np.ndarray:
    """Spanning tree over a Delaunay mesh of random points, plus extra short links."""
    pts = rng.random((n, 2))
    if n < 4:
        return np.array([(i, i + 1) for i in range(n - 1)], dtype=np.int64).reshape(-1, 2)
    tri = Delaunay(pts)
    cand = set()
    for simplex in tri.simplices:
        for a in range(3):
            i, j = sorted((int(simplex[a]), int(simplex[(a + 1) % 3])))
            cand.add((i, j))
    cand = sorted(cand)
    length = np.array([np.linalg.norm(pts[i] - pts[j]) for i, j in cand])
    rows, cols = zip(*cand)
    mst = minimum_spanning_tree(coo_matrix((length, (rows, cols)), shape=(n, n))).tocoo()
    tree = {tuple(sorted((int(i), int(j)))) for i, j in zip(mst.row, mst.col)}
    rest = [e for e in cand if e not in tree]
    want = max(0, int(round(mean_degree * n / 2)) - len(tree))
    extra = []
    if rest and want:
        idx = rng.choice(len(rest), size=min(want, len(rest)), replace=False)
        extra = [rest[i] for i in sorted(idx)]
    return np.array(sorted(tree) + extra, dtype=np.int64)


def _connected(n: int, edges: np.ndarray) -> bool:
    if n == 1:
        return True
    mat = coo_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n, n))
    return connected_components(mat, directed=False)[0] == 1


def _weather(rng, hours: int, hour_of_day: np.ndarray) -> np.ndarray:
    code = np.zeros(hours, dtype=int)
    state = 0
    for t in range(hours):
        if state == 0:
            u = rng.random()
            if u < 0.03:
                state = 1
            elif u < 0.035:
                state = 3
            elif hour_of_day[t] < 7 and u < 0.05:
                state = 2
        elif rng.random() < (0.2 if state == 1 else 0.4):
            state = 0
        code[t] = state
    temp = 22.0 - 10.0 * np.arange(hours) / max(hours, 1) + 5.0 * np.sin((hour_of_day - 9) / 24 * 2 * np.pi)
    temp += rng.normal(0, 1.0, hours)
    precip = np.where(np.isin(code, (1, 3)), rng.gamma(2.0, 1.5, hours), 0.0)
    vis = 12.0 - np.where(code == 1, rng.uniform(3, 7, hours), 0.0) - np.where(code == 2, 9.0, 0.0)
    vis = np.clip(vis - np.where(code == 3, 6.0, 0.0) + rng.normal(0, 0.5, hours), 0.2, None)
    wind = rng.gamma(2.0, 5.0, hours) + np.where(code == 3, 25.0, 0.0)
    return np.stack([temp, precip, vis, wind, code.astype(float)], axis=1)


def _standardize(x: np.ndarray) -> np.ndarray:
    sd = x.std()
    return (x - x.mean()) / sd if sd > 0 else np.zeros_like(x)


def _calibrate(weight: np.ndarray, rate: float) -> np.ndarray:
    """Scale ``weight`` so the clipped probabilities average ``rate``."""
    target = rate * weight.size
    if target <= 0:
        return np.zeros_like(weight)
    lo, hi = 0.0, 1.0 / weight[weight > 0].min()
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.minimum(mid * weight, 1.0).sum() < target:
            lo = mid
        else:
            hi = mid
    return np.minimum(hi * weight, 1.0)


def synth_generate(config: GenConfig, seed: int, out_dir, audit_dir=None) -> dict:
    """Write a bundle under ``out_dir`` and return summary statistics."""
    rng = np.random.default_rng(seed)
    n = config.num_nodes
    for _ in range(MAX_ATTEMPTS):
        edges = _road_edges(rng, n, config.mean_degree)
        if _connected(n, edges):
            break
    else:
        raise GenerationError(f"no connected graph after {MAX_ATTEMPTS} attempts")

    road_type = rng.choice(len(ROAD_TYPE_PROBS), size=n, p=ROAD_TYPE_PROBS)
    limit = np.array(SPEED_LIMITS)[road_type]
    lanes = np.array(BASE_LANES)[road_type] + rng.integers(0, 2, n)
    length = rng.uniform(100, 1500, n).round(1)
    poi = rng.poisson(lam=np.array([0.5, 2.0, 0.3, 1.0, 1.5]), size=(n, 5)) * (1 + (road_type >= 2))[:, None]
    static = np.column_stack([road_type, lanes, length, limit, poi]).astype(float)
    graph = RoadGraph(n, edges, static)
    adj = build_adjacency(graph)

    start = dt.datetime.fromisoformat(config.start_date)
    start_hour = int((start - dt.datetime(1970, 1, 1)).total_seconds() // 3600)
    hours = config.span_days * 24
    hod = (start_hour + np.arange(hours)) % 24

    # traffic: diurnal rush hours times a persistent congestion process
    rush = np.exp(-((hod - 8) ** 2) / 4.0) + np.exp(-((hod - 18) ** 2) / 4.0)
    cong = np.zeros((n, hours))
    c = rng.normal(0, 1, n)
    shocks = rng.normal(0, 0.6, (n, hours))
    for t in range(hours):
        c = 0.85 * c + shocks[:, t]
        cong[:, t] = c
    drop = 0.6 / (1.0 + np.exp(-(cong - 1.0)))
    free = limit * rng.uniform(0.85, 0.95, n)
    speed = free[:, None] * (1 - 0.25 * rush)[None, :] * (1 - drop) + rng.normal(0, 1.5, (n, hours))
    speed = np.clip(speed, 3.0, None)
    count = lanes[:, None] * 400.0 * (0.3 + 0.7 * rush)[None, :] * (1 - 0.5 * drop)
    count = np.clip(count + rng.normal(0, 30, (n, hours)), 0, None)
    occupancy = np.clip(0.1 + 0.7 * drop + 0.1 * rush[None, :] + rng.normal(0, 0.03, (n, hours)), 0, 1)

    weather = _weather(rng, hours, hod)
    adverse = (weather[:, 4] > 0).astype(float)

    # planted rule
    rings = []
    for i in range(n):
        dist = bfs_distances(adj, i, config.rule_depth)
        rings.append([v for v, d in dist.items() if d == config.rule_depth])
    prev = np.zeros_like(speed)
    prev[:, 1:] = speed[:, :-1]
    ring_mean = np.array([prev[r].mean(axis=0) if r else prev[i] for i, r in enumerate(rings)])
    valid = slice(config.min_history_hours, hours)
    risk = np.full((n, hours), np.nan)
    raw = (
        config.speed_weight * _standardize(-prev[:, valid])
        + config.ring_weight * _standardize(-ring_mean[:, valid])
        + config.weather_weight * _standardize(np.broadcast_to(adverse[valid], (n, hours - config.min_history_hours)))
    )
    risk[:, valid] = _standardize(raw)
    weight = np.exp(config.risk_gain * (risk[:, valid] - risk[:, valid].max()))
    prob = _calibrate(weight, config.accident_rate)
    hit = rng.random(prob.shape) < prob
    acc_seg, acc_t = np.nonzero(hit)
    acc_t = acc_t + config.min_history_hours
    order = np.lexsort((acc_seg, acc_t))
    acc_seg, acc_t = acc_seg[order], acc_t[order]
    minutes = rng.integers(0, 60, len(acc_t))
    severity = rng.integers(1, 4, len(acc_t))
    kind = rng.integers(0, 5, len(acc_t))

    missing = rng.random((n, hours)) < config.missing_rate
    for i in np.flatnonzero(rng.random(n) < 0.1):
        span = int(rng.integers(6, 73))
        s0 = int(rng.integers(0, max(1, hours - span)))
        missing[i, s0 : s0 + span] = True

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_edge_list(out / "graph.txt", n, edges)
    with (out / "segments.csv").open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("segment_id,road_type,lanes,length_m,speed_limit,poi_school,poi_shop,poi_hospital,poi_transit,poi_other\n")
        for i in range(n):
            s = static[i]
            fh.write(f"{i},{int(s[0])},{int(s[1])},{s[2]:.1f},{s[3]:.0f}," + ",".join(str(int(v)) for v in s[4:]) + "\n")
    with (out / "speeds.csv").open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("segment_id,epoch_hour,avg_speed,veh_count,occupancy\n")
        lines = []
        for i in range(n):
            sp, ct, oc, miss = speed[i], count[i], occupancy[i], missing[i]
            for t in range(hours):
                if not miss[t]:
                    lines.append(f"{i},{start_hour + t},{sp[t]:.2f},{ct[t]:.1f},{oc[t]:.4f}\n")
        fh.write("".join(lines))
    with (out / "weather.csv").open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch_hour,temp_c,precip_mm,visibility_km,wind_kmh,event_code\n")
        for t in range(hours):
            w = weather[t]
            fh.write(f"{start_hour + t},{w[0]:.2f},{w[1]:.2f},{w[2]:.2f},{w[3]:.2f},{int(w[4])}\n")
    with (out / "accidents.csv").open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("segment_id,epoch_minute,severity,incident_type\n")
        for seg, t, m, sv, kd in zip(acc_seg, acc_t, minutes, severity, kind):
            fh.write(f"{seg},{(start_hour + t) * 60 + m},{sv},{kd}\n")
    end = start + dt.timedelta(hours=hours)
    with (out / "holidays.txt").open("w", encoding="utf-8", newline="\n") as fh:
        for day in HOLIDAYS:
            if start.date() <= dt.date.fromisoformat(day) < end.date():
                fh.write(day + "\n")
    if audit_dir is not None:
        Path(audit_dir).mkdir(parents=True, exist_ok=True)
        with (Path(audit_dir) / "risk.npy").open("wb") as fh:
            np.save(fh, risk, allow_pickle=False)

    return {
        "nodes": n,
        "edges": int(len(edges)),
        "positives": int(len(acc_t)),
        "missing_rate": float(missing.mean()),
        "hours": hours,
    }
