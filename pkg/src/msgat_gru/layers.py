"""Learnable building blocks: graph attention, GRUs, pooling, MLP and head.

Layers are plain functions over parameter dataclasses.  Weight matrices use
the row-vector convention ``x @ W`` with ``W`` shaped ``(d_in, d_out)``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import tensor as tn
from .errors import ContractError, DimensionError
from .graph import Subgraph
from .tensor import Tensor

LEAKY_SLOPE = 0.2
NORM_EPS = 1e-5
BN_MOMENTUM = 0.1


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


@dataclass
class GATLayerParams:
    """One multi-head attention layer.

    ``W`` is ``(H, d_in, d_head)``; ``a_src`` scores the receiving node and
    ``a_dst`` the sending neighbour, both ``(H, d_head)``.
    """

    W: Tensor
    a_src: Tensor
    a_dst: Tensor

    @property
    def heads(self) -> int:
        return self.W.shape[0]

    @property
    def d_in(self) -> int:
        return self.W.shape[1]

    @property
    def d_head(self) -> int:
        return self.W.shape[2]

    @property
    def out_width(self) -> int:
        return self.heads * self.d_head

    @classmethod
    def init(cls, rng, d_in: int, heads: int, d_head: int) -> "GATLayerParams":
        return cls(
            W=_uniform(rng, (heads, d_in, d_head), d_in),
            a_src=_uniform(rng, (heads, d_head), d_head),
            a_dst=_uniform(rng, (heads, d_head), d_head),
        )


@dataclass
class GRUParams:
    W_z: Tensor
    W_r: Tensor
    W_h: Tensor
    U_z: Tensor
    U_r: Tensor
    U_h: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor

    @property
    def d_in(self) -> int:
        return self.W_z.shape[0]

    @property
    def hidden(self) -> int:
        return self.U_z.shape[0]

    @classmethod
    def init(cls, rng, d_in: int, hidden: int) -> "GRUParams":
        # biases share the recurrent fan-in
        return cls(
            W_z=_uniform(rng, (d_in, hidden), hidden),
            W_r=_uniform(rng, (d_in, hidden), hidden),
            W_h=_uniform(rng, (d_in, hidden), hidden),
            U_z=_uniform(rng, (hidden, hidden), hidden),
            U_r=_uniform(rng, (hidden, hidden), hidden),
            U_h=_uniform(rng, (hidden, hidden), hidden),
            b_z=_uniform(rng, (hidden,), hidden),
            b_r=_uniform(rng, (hidden,), hidden),
            b_h=_uniform(rng, (hidden,), hidden),
        )


@dataclass
class AttentionPoolParams:
    v: Tensor
    W_p: Tensor

    @classmethod
    def init(cls, rng, d: int) -> "AttentionPoolParams":
        return cls(v=_uniform(rng, (d,), d), W_p=_uniform(rng, (d, d), d))


@dataclass
class MLPParams:
    """Linear -> ReLU -> BatchNorm -> FC.  Running statistics are buffers."""

    W1: Tensor
    b1: Tensor
    bn_gamma: Tensor
    bn_beta: Tensor
    W2: Tensor
    b2: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def init(cls, rng, d_in: int, hidden: int, d_out: int) -> "MLPParams":
        return cls(
            W1=_uniform(rng, (d_in, hidden), d_in),
            b1=_uniform(rng, (hidden,), d_in),
            bn_gamma=Tensor(np.ones(hidden), requires_grad=True),
            bn_beta=Tensor(np.zeros(hidden), requires_grad=True),
            W2=_uniform(rng, (hidden, d_out), hidden),
            b2=_uniform(rng, (d_out,), hidden),
            running_mean=np.zeros(hidden),
            running_var=np.ones(hidden),
        )


@dataclass
class HeadParams:
    """Layer norm over the fused vector, then a single output unit."""

    ln_gamma: Tensor
    ln_beta: Tensor
    W: Tensor
    b: Tensor

    @classmethod
    def init(cls, rng, d_in: int) -> "HeadParams":
        return cls(
            ln_gamma=Tensor(np.ones(d_in), requires_grad=True),
            ln_beta=Tensor(np.zeros(d_in), requires_grad=True),
            W=_uniform(rng, (d_in, 1), d_in),
            b=_uniform(rng, (1,), d_in),
        )


# -- parameter traversal -----------------------------------------------
def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Yield ``(dotted_name, tensor)`` for every learnable tensor in ``obj``."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from named_parameters(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, f"{prefix}.{i}" if prefix else str(i))


def named_buffers(obj, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
    """Yield non-learnable numpy state (batch-norm running statistics)."""
    if isinstance(obj, np.ndarray):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from named_buffers(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_buffers(item, f"{prefix}.{i}" if prefix else str(i))


# -- graph attention ---------------------------------------------------
def _head_matrix(W: Tensor) -> Tensor:
    """(H, d_in, d_head) -> (d_in, H*d_head), heads laid out contiguously."""
    H, d_in, dh = W.shape
    return W.transpose(1, 0, 2).reshape(d_in, H * dh)


def gat_forward(node_feats: Tensor, pairs, params: GATLayerParams, return_attention: bool = False):
    """Multi-head graph attention over explicit ``(target, source)`` pairs.

    ``node_feats`` is ``(..., N, d_in)``; any leading axes (e.g. time) are
    processed independently with shared weights.  Output is
    ``(..., N, H*d_head)`` with heads concatenated.
    """
    x = tn.as_tensor(node_feats)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if x.shape[-1] != params.d_in:
        raise DimensionError(f"node features width {x.shape[-1]} != layer input width {params.d_in}")
    n = x.shape[-2]
    tgt, src = pairs[:, 0], pairs[:, 1]
    counts = np.bincount(tgt, minlength=n)
    if len(counts) > n or (n and counts.min() == 0):
        missing = np.flatnonzero(counts[:n] == 0)
        raise ContractError(f"nodes {missing.tolist()} have no attention pairs (self-pair missing?)")

    H, dh = params.heads, params.d_head
    lead = x.shape[:-2]
    wh = (x @ _head_matrix(params.W)).reshape(lead + (n, H, dh))
    score_tgt = (wh * params.a_src).sum(axis=-1)
    score_src = (wh * params.a_dst).sum(axis=-1)
    e = tn.leaky_relu(tn.take(score_tgt, tgt, axis=-2) + tn.take(score_src, src, axis=-2), LEAKY_SLOPE)
    alpha = tn.segment_softmax(e, tgt, n, axis=-2)
    msg = tn.take(wh, src, axis=-3) * alpha.reshape(alpha.shape + (1,))
    agg = tn.segment_sum(msg, tgt, n, axis=-3)
    out = tn.elu(agg).reshape(lead + (n, H * dh))
    if return_attention:
        return out, alpha
    return out


def multi_scale_gat_pairs(node_feats: Tensor, pairs_per_scale: Sequence, params_per_scale: Sequence[GATLayerParams]) -> Tensor:
    if len(pairs_per_scale) != len(params_per_scale) or not params_per_scale:
        raise ContractError(
            f"need one pair set per scale: {len(pairs_per_scale)} pair sets, {len(params_per_scale)} parameter sets"
        )
    outs = [gat_forward(node_feats, pairs, p) for pairs, p in zip(pairs_per_scale, params_per_scale)]
    return outs[0] if len(outs) == 1 else tn.concat(outs, axis=-1)


def multi_scale_gat(node_feats: Tensor, subgraph: Subgraph, params_per_scale: Sequence[GATLayerParams], S: int | None = None) -> Tensor:
    """Scale ``s`` attends over the ring at distance ``s`` (plus self); scales concatenated."""
    S = len(params_per_scale) if S is None else S
    if S < 1 or len(params_per_scale) != S:
        raise ContractError(f"S={S} but {len(params_per_scale)} parameter sets given")
    pairs = [subgraph.ring_pairs(s) for s in range(1, S + 1)]
    return multi_scale_gat_pairs(node_feats, pairs, params_per_scale)


# -- recurrent ---------------------------------------------------------
def gru_cell(x: Tensor, h: Tensor, params: GRUParams) -> Tensor:
    x, h = tn.as_tensor(x), tn.as_tensor(h)
    if x.shape[-1] != params.d_in or h.shape[-1] != params.hidden:
        raise DimensionError(
            f"gru_cell widths: x {x.shape[-1]} vs {params.d_in}, h {h.shape[-1]} vs {params.hidden}"
        )
    z = tn.sigmoid(x @ params.W_z + h @ params.U_z + params.b_z)
    r = tn.sigmoid(x @ params.W_r + h @ params.U_r + params.b_r)
    cand = tn.tanh(x @ params.W_h + (r * h) @ params.U_h + params.b_h)
    return (1.0 - z) * h + z * cand


def _flat2(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1])


def gru_step(x_zr: Tensor, x_h: Tensor, h: Tensor, U_zr: Tensor, U_h: Tensor) -> Tensor:
    """One GRU update from precomputed input projections, as a single tape op.

    ``x_zr`` holds ``x W_z + b_z`` and ``x W_r + b_r`` side by side, ``x_h``
    holds ``x W_h + b_h``; ``U_zr`` is ``[U_z | U_r]``.
    """
    d = h.shape[-1]
    zr = 0.5 * (1.0 + np.tanh(0.5 * (x_zr.data + h.data @ U_zr.data)))
    z, r = zr[..., :d], zr[..., d:]
    rh = r * h.data
    cand = np.tanh(x_h.data + rh @ U_h.data)
    out = h.data + z * (cand - h.data)

    def bw(g):
        hd = h.data
        da_h = g * z * (1.0 - cand * cand)
        drh = da_h @ U_h.data.T
        da_zr = np.concatenate([g * (cand - hd), drh * hd], axis=-1) * zr * (1.0 - zr)
        dh = g * (1.0 - z) + drh * r + da_zr @ U_zr.data.T
        dU_zr = _flat2(hd).T @ _flat2(da_zr) if U_zr.requires_grad else None
        dU_h = _flat2(rh).T @ _flat2(da_h) if U_h.requires_grad else None
        return da_zr, da_h, dh, dU_zr, dU_h

    return Tensor._result(out, (x_zr, x_h, h, U_zr, U_h), bw, "gru_step")


def _gru_scan(seq: Tensor, params: GRUParams, reverse: bool) -> list[Tensor]:
    """Run one GRU over axis 0 of ``seq`` starting from a zero state.

    Same recurrence as :func:`gru_cell`, with input projections for all steps
    computed up front and each step fused into one op.
    """
    if seq.shape[-1] != params.d_in:
        raise DimensionError(f"sequence width {seq.shape[-1]} != GRU input width {params.d_in}")
    T, d = seq.shape[0], params.hidden
    W_zr = tn.concat([params.W_z, params.W_r], axis=1)
    U_zr = tn.concat([params.U_z, params.U_r], axis=1)
    x_zr = seq @ W_zr + tn.concat([params.b_z, params.b_r], axis=0)
    x_h = seq @ params.W_h + params.b_h
    h = Tensor(np.zeros(seq.shape[1:-1] + (d,)))
    states = [None] * T
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for t in steps:
        h = gru_step(x_zr[t], x_h[t], h, U_zr, params.U_h)
        states[t] = h
    return states


def bigru_forward(sequence: Tensor, params_fwd: Sequence[GRUParams], params_bwd: Sequence[GRUParams], depth: int | None = None):
    """Stacked bidirectional GRU over axis 0 (time).

    Returns ``(outputs, final)``: outputs is ``(T, ..., 2d)`` and final joins
    the last forward state (at step T-1) with the last backward state (at
    step 0).
    """
    seq = tn.as_tensor(sequence)
    if seq.ndim < 2 or seq.shape[0] < 1:
        raise ContractError(f"bigru needs T >= 1 steps, got shape {seq.shape}")
    depth = len(params_fwd) if depth is None else depth
    if depth < 1 or len(params_fwd) != depth or len(params_bwd) != depth:
        raise ContractError(f"depth={depth} but got {len(params_fwd)} forward / {len(params_bwd)} backward layers")
    final = None
    for pf, pb in zip(params_fwd, params_bwd):
        fwd = _gru_scan(seq, pf, reverse=False)
        bwd = _gru_scan(seq, pb, reverse=True)
        seq = tn.concat([tn.stack(fwd, 0), tn.stack(bwd, 0)], axis=-1)
        final = tn.concat([fwd[-1], bwd[0]], axis=-1)
    return seq, final


# -- pooling -----------------------------------------------------------
def attention_pool(node_embs: Tensor, params: AttentionPoolParams):
    """Softmax-weighted sum over nodes; returns ``(pooled, beta)``."""
    x = tn.as_tensor(node_embs)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ContractError(f"attention_pool needs N >= 1 node embeddings, got shape {x.shape}")
    scores = tn.tanh(x @ params.W_p) @ params.v
    beta = tn.softmax(scores, axis=0)
    pooled = (x * beta.reshape(-1, 1)).sum(axis=0)
    return pooled, beta


def attention_pool_segments(node_embs: Tensor, segments, num_segments: int, params: AttentionPoolParams):
    """Attention pooling of several graphs packed along axis -2.

    ``node_embs`` is ``(..., M, d)`` and ``segments[m]`` names the graph node
    ``m`` belongs to.  Returns pooled ``(..., num_segments, d)`` and beta
    ``(..., M)``.
    """
    x = tn.as_tensor(node_embs)
    scores = tn.tanh(x @ params.W_p) @ params.v
    beta = tn.segment_softmax(scores, segments, num_segments, axis=-1)
    weighted = x * beta.reshape(beta.shape + (1,))
    return tn.segment_sum(weighted, segments, num_segments, axis=-2), beta


# -- external branch and head -----------------------------------------
def external_mlp(x_ext: Tensor, params: MLPParams, training: bool) -> Tensor:
    """Linear -> ReLU -> BatchNorm -> FC, in that order.

    In training mode normalisation uses batch statistics (population
    variance) and running statistics move with momentum 0.1; in eval mode
    the running statistics are used.
    """
    x = tn.as_tensor(x_ext)
    single = x.ndim == 1
    if single:
        x = x.reshape(1, -1)
    if x.shape[-1] != params.W1.shape[0]:
        raise DimensionError(f"external width {x.shape[-1]} != {params.W1.shape[0]}")
    a = tn.relu(x @ params.W1 + params.b1)
    if training:
        mu = a.mean(axis=0, keepdims=True)
        centered = a - mu
        var = (centered * centered).mean(axis=0, keepdims=True)
        normed = centered / (var + NORM_EPS) ** 0.5
        params.running_mean[:] = (1 - BN_MOMENTUM) * params.running_mean + BN_MOMENTUM * mu.data[0]
        params.running_var[:] = (1 - BN_MOMENTUM) * params.running_var + BN_MOMENTUM * var.data[0]
    else:
        normed = (a - params.running_mean) / np.sqrt(params.running_var + NORM_EPS)
    out = (normed * params.bn_gamma + params.bn_beta) @ params.W2 + params.b2
    return out.reshape(-1) if single else out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / (var + NORM_EPS) ** 0.5 * gamma + beta


def dropout_mask(rng: np.random.Generator, shape, p: float) -> np.ndarray:
    """Inverted-dropout mask: kept units scaled by 1/(1-p)."""
    return (rng.random(shape) >= p).astype(np.float64) / (1.0 - p)


def fusion_head(
    h_temp: Tensor | None,
    h_spatial: Tensor | None,
    z_ext: Tensor | None,
    params: HeadParams,
    training: bool,
    dropout_p: float = 0.3,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Concatenate the three branches, normalise, drop out, score, squash."""
    missing = [n for n, v in (("h_temp", h_temp), ("h_spatial", h_spatial), ("z_external", z_ext)) if v is None]
    if missing:
        raise ContractError(f"fusion head needs all three branches; missing {missing}")
    fused = tn.concat([h_temp, h_spatial, z_ext], axis=-1)
    if fused.shape[-1] != params.W.shape[0]:
        raise DimensionError(f"fused width {fused.shape[-1]} != head input width {params.W.shape[0]}")
    fused = layer_norm(fused, params.ln_gamma, params.ln_beta)
    if training and dropout_p > 0:
        if rng is None:
            raise ContractError("training-mode dropout needs an explicit rng")
        fused = fused * dropout_mask(rng, fused.shape, dropout_p)
    logit = fused @ params.W + params.b
    return tn.sigmoid(logit.reshape(logit.shape[:-1]))
