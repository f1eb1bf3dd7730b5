"""The full three-branch network: spatial GAT, temporal MSGAT + bi-GRUs, external MLP."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as tn
from .errors import ConfigError, DimensionError
from .graph import Subgraph
from .layers import (
    AttentionPoolParams,
    GATLayerParams,
    GRUParams,
    HeadParams,
    MLPParams,
    attention_pool_segments,
    bigru_forward,
    external_mlp,
    fusion_head,
    gat_forward,
    multi_scale_gat_pairs,
    named_buffers,
    named_parameters,
)
from .tensor import Tensor

SPATIAL_BRANCH_LAYERS = 2


@dataclass(frozen=True)
class ModelConfig:
    S: int = 3
    H: int = 4
    d: int = 32
    gru_depth: int = 2
    T: int = 24
    k: int | None = None
    dropout_p: float = 0.3
    horizon_minutes: int = 60
    threshold: float = 0.5
    spatial_dim: int = 10
    temporal_dim: int = 4
    external_dim: int = 9

    def __post_init__(self):
        if self.k is None:
            object.__setattr__(self, "k", self.S)
        for name in ("S", "H", "d", "gru_depth", "T", "k", "spatial_dim", "temporal_dim", "external_dim"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if not 0 <= self.dropout_p < 1:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if not 0 < self.threshold < 1:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.horizon_minutes < 1:
            raise ConfigError(f"horizon_minutes must be positive, got {self.horizon_minutes}")

    @property
    def d_head(self) -> int:
        # heads split the hidden width
        return max(1, self.d // self.H)

    @property
    def gat_width(self) -> int:
        return self.H * self.d_head

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class ModelParams:
    spatial_gat: list
    temporal_msgat: list
    node_gru_fwd: list
    node_gru_bwd: list
    temp_pool: AttentionPoolParams
    graph_gru_fwd: list
    graph_gru_bwd: list
    spatial_pool: AttentionPoolParams
    external: MLPParams
    head: HeadParams

    def named_parameters(self):
        return list(named_parameters(self))

    def named_buffers(self):
        return list(named_buffers(self))

    def zero_grad(self) -> None:
        for _, p in named_parameters(self):
            p.grad = None


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    H, dh, d = config.H, config.d_head, config.d
    w = config.gat_width
    spatial = [GATLayerParams.init(rng, config.spatial_dim, H, dh)]
    spatial += [GATLayerParams.init(rng, w, H, dh) for _ in range(SPATIAL_BRANCH_LAYERS - 1)]
    msgat = [GATLayerParams.init(rng, config.temporal_dim, H, dh) for _ in range(config.S)]

    def gru_stack(d_in):
        fwd, bwd = [], []
        for layer in range(config.gru_depth):
            width = d_in if layer == 0 else 2 * d
            fwd.append(GRUParams.init(rng, width, d))
            bwd.append(GRUParams.init(rng, width, d))
        return fwd, bwd

    node_fwd, node_bwd = gru_stack(config.S * w)
    temp_pool = AttentionPoolParams.init(rng, 2 * d)
    graph_fwd, graph_bwd = gru_stack(2 * d)
    spatial_pool = AttentionPoolParams.init(rng, w)
    external = MLPParams.init(rng, config.external_dim, d, d)
    head = HeadParams.init(rng, 2 * d + w + d)
    return ModelParams(
        spatial, msgat, node_fwd, node_bwd, temp_pool, graph_fwd, graph_bwd, spatial_pool, external, head
    )


def count_parameters(config: ModelConfig) -> int:
    """Closed-form count of learnable scalars (running statistics excluded)."""
    H, dh, d, w = config.H, config.d_head, config.d, config.gat_width

    def gat(d_in):
        return H * d_in * dh + 2 * H * dh

    def gru(d_in):
        return 3 * d_in * d + 3 * d * d + 3 * d

    def bigru_stack(d_in):
        return 2 * sum(gru(d_in if layer == 0 else 2 * d) for layer in range(config.gru_depth))

    def pool(width):
        return width + width * width

    fused = 2 * d + w + d
    return (
        gat(config.spatial_dim)
        + (SPATIAL_BRANCH_LAYERS - 1) * gat(w)
        + config.S * gat(config.temporal_dim)
        + bigru_stack(config.S * w)
        + pool(2 * d)
        + bigru_stack(2 * d)
        + pool(w)
        + (config.external_dim * d + d + 2 * d + d * d + d)
        + (2 * fused + fused + 1)
    )


@dataclass
class SampleBatch:
    """Per-sample graph inputs, already normalised.

    ``spatial_x[b]`` is ``(N_b, spatial_dim)``, ``temporal_x[b]`` is
    ``(T, N_b, temporal_dim)`` and ``external_x`` is ``(B, external_dim)``.
    """

    subgraphs: list
    spatial_x: list
    temporal_x: list
    external_x: np.ndarray
    labels: np.ndarray
    _packed: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.subgraphs)

    def __post_init__(self):
        n = len(self.subgraphs)
        self.external_x = np.asarray(self.external_x, dtype=np.float64).reshape(n, -1) if n else np.zeros((0, 0))
        self.labels = np.asarray(self.labels, dtype=np.float64).reshape(-1)
        if not (len(self.spatial_x) == len(self.temporal_x) == len(self.external_x) == len(self.labels) == n):
            raise DimensionError(
                f"batch fields disagree in length: {n} subgraphs, {len(self.spatial_x)} spatial, "
                f"{len(self.temporal_x)} temporal, {len(self.external_x)} external, {len(self.labels)} labels"
            )

    def packed(self, S: int) -> dict:
        """Disjoint union of all subgraphs with pair lists in packed node ids."""
        if S in self._packed:
            return self._packed[S]
        offsets = np.cumsum([0] + [sg.num_nodes for sg in self.subgraphs])
        seg = np.repeat(np.arange(len(self.subgraphs)), np.diff(offsets))
        one_hop, rings = [], [[] for _ in range(S)]
        for off, sg in zip(offsets[:-1], self.subgraphs):
            e = sg.local_edges
            selfs = np.arange(sg.num_nodes)
            one_hop.append(np.concatenate([e, e[:, ::-1], np.stack([selfs, selfs], 1)]) + off)
            for s in range(S):
                rings[s].append(sg.ring_pairs(s + 1) + off)
        packed = {
            "offsets": offsets,
            "segments": seg,
            "one_hop": np.concatenate(one_hop),
            "rings": [np.concatenate(r) for r in rings],
            "spatial": np.concatenate(self.spatial_x, axis=0),
            "temporal": np.concatenate(self.temporal_x, axis=1),
        }
        self._packed[S] = packed
        return packed


def _check_batch(batch: SampleBatch, config: ModelConfig) -> None:
    for b, (sg, xs, xt) in enumerate(zip(batch.subgraphs, batch.spatial_x, batch.temporal_x)):
        if xs.shape != (sg.num_nodes, config.spatial_dim):
            raise DimensionError(f"sample {b}: spatial_x {xs.shape} != ({sg.num_nodes}, {config.spatial_dim})")
        if xt.shape != (config.T, sg.num_nodes, config.temporal_dim):
            raise DimensionError(
                f"sample {b}: temporal_x {xt.shape} != ({config.T}, {sg.num_nodes}, {config.temporal_dim})"
            )
    if batch.external_x.shape[1] != config.external_dim:
        raise DimensionError(f"external_x width {batch.external_x.shape[1]} != {config.external_dim}")


def forward(
    batch: SampleBatch,
    params: ModelParams,
    config: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Accident probability for the centre node of every sample, in batch order."""
    B = len(batch)
    if B == 0:
        return Tensor(np.zeros(0))
    _check_batch(batch, config)
    pk = batch.packed(config.S)
    seg = pk["segments"]

    # spatial branch
    h = Tensor(pk["spatial"])
    for layer in params.spatial_gat:
        h = gat_forward(h, pk["one_hop"], layer)
    h_spatial, _ = attention_pool_segments(h, seg, B, params.spatial_pool)

    # temporal branch: per-step multi-scale attention, per-node bi-GRU,
    # per-step pooling, then a graph-level bi-GRU over the pooled sequence
    xt = Tensor(pk["temporal"])
    ms = multi_scale_gat_pairs(xt, pk["rings"], params.temporal_msgat)
    node_seq, _ = bigru_forward(ms, params.node_gru_fwd, params.node_gru_bwd)
    pooled_seq, _ = attention_pool_segments(node_seq, seg, B, params.temp_pool)
    _, h_temp = bigru_forward(pooled_seq, params.graph_gru_fwd, params.graph_gru_bwd)

    z_ext = external_mlp(Tensor(batch.external_x), params.external, training)
    return fusion_head(h_temp, h_spatial, z_ext, params.head, training, config.dropout_p, rng)


def params_to_arrays(params: ModelParams) -> dict:
    arrays = {name: t.data for name, t in named_parameters(params)}
    arrays.update({name: buf for name, buf in named_buffers(params)})
    return arrays


def params_from_arrays(config: ModelConfig, arrays: dict) -> ModelParams:
    params = init_params(config, 0)
    expected = params_to_arrays(params)
    if set(expected) != set(arrays):
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        raise DimensionError(f"checkpoint arrays do not match config: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, t in named_parameters(params):
        if arrays[name].shape != t.shape:
            raise DimensionError(f"{name}: checkpoint shape {arrays[name].shape} != {t.shape}")
        t.data = np.array(arrays[name], dtype=np.float64)
    for name, buf in named_buffers(params):
        buf[:] = arrays[name]
    return params


def make_sample(subgraph: Subgraph, spatial, temporal, external, label) -> SampleBatch:
    """Single-sample batch, mostly for tests and interactive use."""
    return SampleBatch([subgraph], [np.asarray(spatial, float)], [np.asarray(temporal, float)], [external], [label])
