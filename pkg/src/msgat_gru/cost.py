"""Closed-form compute cost and a wall-clock probe of the forward pass."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, replace

import numpy as np

from .errors import ContractError
from .model import ModelConfig, SampleBatch, forward, init_params


@dataclass(frozen=True)
class CostReport:
    S: int
    H: int
    d: int
    T: int
    N: int
    E: int
    spatial_per_step: int
    spatial_total: int
    temporal: int
    total: int
    baseline_total: int
    ratio_to_baseline: float

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        rows = [
            ("S (scales)", self.S),
            ("H (heads)", self.H),
            ("d (hidden)", self.d),
            ("T (lookback)", self.T),
            ("N (nodes)", self.N),
            ("E (edges)", self.E),
            ("spatial units / step", self.spatial_per_step),
            ("spatial units, all steps", self.spatial_total),
            ("temporal GRU units", self.temporal),
            ("total units", self.total),
            ("S=1,H=1 baseline total", self.baseline_total),
            ("ratio to baseline", f"{self.ratio_to_baseline:.4f}"),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows) + "\n"


def _units(S, H, d, T, N, E):
    spatial = S * H * (E * d + N * d * d)
    return spatial, T * spatial, T * N * d * d


def estimate_cost(config: ModelConfig, N: int, E: int) -> CostReport:
    """Per-step spatial cost ``S*H*(E*d + N*d^2)`` and GRU cost ``T*N*d^2``."""
    if N < 1 or E < 1:
        raise ContractError(f"N and E must be >= 1, got N={N}, E={E}")
    S, H, d, T = config.S, config.H, config.d, config.T
    per_step, spatial_total, temporal = _units(S, H, d, T, N, E)
    _, base_spatial, base_temporal = _units(1, 1, d, T, N, E)
    total = spatial_total + temporal
    baseline = base_spatial + base_temporal
    return CostReport(S, H, d, T, N, E, per_step, spatial_total, temporal, total, baseline, total / baseline)


def time_forward(batch: SampleBatch, config: ModelConfig, scales=(1, 2, 3), repeats: int = 5, seed: int = 0) -> dict:
    """Median eval-mode forward time per scale count, other settings fixed."""
    times = {}
    for S in scales:
        cfg = replace(config, S=S, k=config.k)
        params = init_params(cfg, seed)
        forward(batch, params, cfg)  # warm-up
        samples = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            forward(batch, params, cfg)
            samples.append(time.perf_counter() - t0)
        times[S] = float(np.median(samples))
    return times


def linear_fit_r2(xs, ys) -> float:
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    slope, intercept = np.polyfit(xs, ys, 1)
    resid = ys - (slope * xs + intercept)
    ss_tot = np.sum((ys - ys.mean()) ** 2)
    return float(1.0 - np.sum(resid**2) / ss_tot) if ss_tot > 0 else 1.0
