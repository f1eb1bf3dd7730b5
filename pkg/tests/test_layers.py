import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import loop_gat, loop_gru_cell, random_edges

from msgat_gru.errors import ContractError, DimensionError
from msgat_gru.graph import RoadGraph, build_adjacency, khop_subgraph
from msgat_gru.layers import (
    AttentionPoolParams,
    GATLayerParams,
    GRUParams,
    HeadParams,
    MLPParams,
    attention_pool,
    attention_pool_segments,
    bigru_forward,
    external_mlp,
    fusion_head,
    gat_forward,
    gru_cell,
    multi_scale_gat,
)
from msgat_gru.tensor import Tensor, grad_check


def star_subgraph():
    g = RoadGraph(6, [(0, 1), (0, 2), (1, 3), (3, 4), (2, 5)])
    return khop_subgraph(g, build_adjacency(g), 0, 3)


def gru_dict(p):
    return {k: getattr(p, k).data for k in ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")}


def test_gat_matches_loop_oracle():
    rng = np.random.default_rng(0)
    sg = star_subgraph()
    params = GATLayerParams.init(rng, 3, 2, 4)
    x = rng.normal(size=(sg.num_nodes, 3))
    pairs = sg.ring_pairs(1)
    out, alpha = gat_forward(Tensor(x), pairs, params, return_attention=True)
    want, alphas = loop_gat(x, pairs.tolist(), params.W.data, params.a_src.data, params.a_dst.data)
    np.testing.assert_allclose(out.data, want, atol=1e-12)
    for h in range(2):
        for i in range(sg.num_nodes):
            np.testing.assert_allclose(alpha.data[pairs[:, 0] == i, h], alphas[(h, i)], atol=1e-12)


def test_gat_shares_weights_over_time_axis():
    rng = np.random.default_rng(1)
    sg = star_subgraph()
    params = GATLayerParams.init(rng, 2, 2, 3)
    x = rng.normal(size=(4, sg.num_nodes, 2))
    pairs = sg.ring_pairs(2)
    batched = gat_forward(Tensor(x), pairs, params).data
    for t in range(4):
        np.testing.assert_allclose(batched[t], gat_forward(Tensor(x[t]), pairs, params).data, atol=1e-12)


def test_gat_contracts():
    rng = np.random.default_rng(2)
    params = GATLayerParams.init(rng, 3, 1, 2)
    with pytest.raises(ContractError):
        gat_forward(Tensor(np.ones((3, 3))), [(0, 0), (1, 1)], params)
    with pytest.raises(DimensionError):
        gat_forward(Tensor(np.ones((2, 4))), [(0, 0), (1, 1)], params)


def test_single_node_gat_attends_to_itself():
    rng = np.random.default_rng(3)
    params = GATLayerParams.init(rng, 2, 2, 2)
    _, alpha = gat_forward(Tensor(rng.normal(size=(1, 2))), [(0, 0)], params, return_attention=True)
    np.testing.assert_array_equal(alpha.data, 1.0)


def test_multi_scale_width_and_ring_isolation():
    rng = np.random.default_rng(4)
    sg = star_subgraph()
    scales = [GATLayerParams.init(rng, 2, 2, 3) for _ in range(3)]
    x = rng.normal(size=(sg.num_nodes, 2))
    out = multi_scale_gat(Tensor(x), sg, scales)
    assert out.shape == (sg.num_nodes, 18)
    # scale 3 at the centre only sees nodes at distance 3 (original node 4)
    far = sg.remap[4]
    x2 = x.copy()
    x2[sg.remap[1]] += 5.0  # distance 1 from the centre
    out2 = multi_scale_gat(Tensor(x2), sg, scales)
    c = sg.center_local
    np.testing.assert_allclose(out.data[c, 12:], out2.data[c, 12:], atol=1e-12)
    x3 = x.copy()
    x3[far] += 5.0
    assert not np.allclose(multi_scale_gat(Tensor(x3), sg, scales).data[c, 12:], out.data[c, 12:])


def test_gru_cell_matches_numpy_oracle():
    rng = np.random.default_rng(5)
    p = GRUParams.init(rng, 3, 4)
    x, h = rng.normal(size=(2, 3)), rng.normal(size=(2, 4))
    np.testing.assert_allclose(gru_cell(Tensor(x), Tensor(h), p).data, loop_gru_cell(x, h, gru_dict(p)), atol=1e-14)


def test_gru_zero_update_gate_keeps_state():
    rng = np.random.default_rng(6)
    p = GRUParams.init(rng, 2, 3)
    p.b_z.data[:] = -1e3
    h = rng.normal(size=(1, 3))
    np.testing.assert_allclose(gru_cell(Tensor(rng.normal(size=(1, 2))), Tensor(h), p).data, h, atol=1e-12)


def test_bigru_matches_cell_unrolled():
    rng = np.random.default_rng(7)
    fwd, bwd = [GRUParams.init(rng, 3, 2)], [GRUParams.init(rng, 3, 2)]
    seq = rng.normal(size=(5, 4, 3))
    out, final = bigru_forward(Tensor(seq), fwd, bwd)
    hf = np.zeros((4, 2))
    hb = np.zeros((4, 2))
    fw_states, bw_states = [], [None] * 5
    for t in range(5):
        hf = loop_gru_cell(seq[t], hf, gru_dict(fwd[0]))
        fw_states.append(hf)
    for t in reversed(range(5)):
        hb = loop_gru_cell(seq[t], hb, gru_dict(bwd[0]))
        bw_states[t] = hb
    want = np.concatenate([np.stack(fw_states), np.stack(bw_states)], axis=-1)
    np.testing.assert_allclose(out.data, want, atol=1e-13)
    np.testing.assert_allclose(final.data, np.concatenate([fw_states[-1], bw_states[0]], -1), atol=1e-13)


def test_bigru_single_step_and_empty():
    rng = np.random.default_rng(8)
    fwd, bwd = [GRUParams.init(rng, 2, 2)], [GRUParams.init(rng, 2, 2)]
    out, final = bigru_forward(Tensor(rng.normal(size=(1, 3, 2))), fwd, bwd)
    np.testing.assert_allclose(out.data[0], final.data)
    with pytest.raises(ContractError):
        bigru_forward(Tensor(np.zeros((0, 3, 2))), fwd, bwd)


def test_attention_pool_constant_embeddings():
    rng = np.random.default_rng(9)
    p = AttentionPoolParams.init(rng, 3)
    x = np.tile(rng.normal(size=3), (5, 1))
    pooled, beta = attention_pool(Tensor(x), p)
    np.testing.assert_allclose(beta.data, 0.2)
    np.testing.assert_allclose(pooled.data, x[0])


def test_segment_pool_matches_per_graph_pool():
    rng = np.random.default_rng(10)
    p = AttentionPoolParams.init(rng, 3)
    x = rng.normal(size=(7, 3))
    seg = np.array([0, 0, 0, 1, 1, 2, 2])
    pooled, beta = attention_pool_segments(Tensor(x), seg, 3, p)
    for s in range(3):
        ref, ref_beta = attention_pool(Tensor(x[seg == s]), p)
        np.testing.assert_allclose(pooled.data[s], ref.data, atol=1e-13)
        np.testing.assert_allclose(beta.data[seg == s], ref_beta.data, atol=1e-13)


def test_external_mlp_batchnorm_statistics():
    rng = np.random.default_rng(11)
    p = MLPParams.init(rng, 4, 6, 3)
    x = rng.normal(size=(16, 4))
    external_mlp(Tensor(x), p, training=True)
    a = np.maximum(x @ p.W1.data + p.b1.data, 0)
    np.testing.assert_allclose(p.running_mean, 0.1 * a.mean(0), atol=1e-14)
    np.testing.assert_allclose(p.running_var, 0.9 + 0.1 * a.var(0), atol=1e-14)
    # eval mode is deterministic and uses the running statistics
    e1 = external_mlp(Tensor(x[:1]), p, training=False).data
    e2 = external_mlp(Tensor(x[0]), p, training=False).data
    np.testing.assert_allclose(e1[0], e2)


def test_fusion_head_contracts_and_range():
    rng = np.random.default_rng(12)
    hp = HeadParams.init(rng, 6)
    a, b, c = (Tensor(rng.normal(size=(3, 2))) for _ in range(3))
    y = fusion_head(a, b, c, hp, training=False)
    assert y.shape == (3,) and np.all((y.data > 0) & (y.data < 1))
    with pytest.raises(ContractError, match="h_spatial"):
        fusion_head(a, None, c, hp, training=False)
    with pytest.raises(ContractError):
        fusion_head(a, b, c, hp, training=True, dropout_p=0.3, rng=None)


def test_dropout_only_in_training():
    rng = np.random.default_rng(13)
    hp = HeadParams.init(rng, 6)
    parts = [Tensor(rng.normal(size=(4, 2))) for _ in range(3)]
    y0 = fusion_head(*parts, hp, training=False).data
    y1 = fusion_head(*parts, hp, training=False).data
    np.testing.assert_array_equal(y0, y1)
    yt = fusion_head(*parts, hp, training=True, dropout_p=0.5, rng=np.random.default_rng(0)).data
    assert not np.allclose(yt, y0)


# -- gradient checks per layer ------------------------------------------------
def _params(obj):
    from msgat_gru.layers import named_parameters

    return [t for _, t in named_parameters(obj)]


def test_gat_gradients():
    rng = np.random.default_rng(20)
    sg = star_subgraph()
    p = GATLayerParams.init(rng, 3, 2, 2)
    x = Tensor(rng.normal(size=(sg.num_nodes, 3)), requires_grad=True)
    w = rng.normal(size=(sg.num_nodes, 4))
    pairs = sg.ring_pairs(1)
    assert grad_check(lambda *_: (gat_forward(x, pairs, p) * w).sum(), [x] + _params(p)) < 1e-6


def test_gru_and_bigru_gradients():
    rng = np.random.default_rng(21)
    p = GRUParams.init(rng, 3, 2)
    x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    h = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    assert grad_check(lambda *_: (gru_cell(x, h, p) ** 2).sum(), [x, h] + _params(p)) < 1e-6
    fwd = [GRUParams.init(rng, 3, 2), GRUParams.init(rng, 4, 2)]
    bwd = [GRUParams.init(rng, 3, 2), GRUParams.init(rng, 4, 2)]
    seq = Tensor(rng.normal(size=(3, 2, 3)), requires_grad=True)
    w = rng.normal(size=(3, 2, 4))

    def f(*_):
        out, final = bigru_forward(seq, fwd, bwd)
        return (out * w).sum() + (final**2).sum()

    assert grad_check(f, [seq] + _params(fwd) + _params(bwd)) < 1e-6


def test_pool_mlp_head_gradients():
    rng = np.random.default_rng(22)
    pool = AttentionPoolParams.init(rng, 3)
    x = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    assert grad_check(lambda *_: (attention_pool(x, pool)[0] ** 2).sum(), [x] + _params(pool)) < 1e-6
    mlp = MLPParams.init(rng, 4, 3, 2)
    e = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
    w = rng.normal(size=(6, 2))
    assert grad_check(lambda *_: (external_mlp(e, mlp, True) * w).sum(), [e] + _params(mlp)) < 1e-6
    head = HeadParams.init(rng, 6)
    parts = [Tensor(rng.normal(size=(3, 2)), requires_grad=True) for _ in range(3)]

    def f(*_):
        return fusion_head(*parts, head, training=True, dropout_p=0.3, rng=np.random.default_rng(5)).sum()

    assert grad_check(f, parts + _params(head)) < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 12), st.integers(0, 10_000), st.integers(1, 3), st.integers(1, 3))
def test_attention_coefficients_normalise(n, seed, heads, s):
    rng = np.random.default_rng(seed)
    g = RoadGraph(n, random_edges(rng, n, 0.3))
    sg = khop_subgraph(g, build_adjacency(g), int(rng.integers(n)), 3)
    p = GATLayerParams.init(rng, 2, heads, 2)
    pairs = sg.ring_pairs(s)
    _, alpha = gat_forward(Tensor(rng.normal(size=(sg.num_nodes, 2)) * 10), pairs, p, return_attention=True)
    sums = np.zeros((sg.num_nodes, heads))
    np.add.at(sums, pairs[:, 0], alpha.data)
    np.testing.assert_allclose(sums, 1.0, atol=1e-9)
