import numpy as np
import pytest

from oracles import random_edges

from msgat_gru.data import prepare
from msgat_gru.graph import RoadGraph, build_adjacency, khop_subgraph
from msgat_gru.model import ModelConfig, SampleBatch
from msgat_gru.synth import GenConfig, synth_generate


def random_batch(config: ModelConfig, batch_size: int, rng, n_nodes: int = 8, p: float = 0.35) -> SampleBatch:
    """Random subgraphs with random features, sized for ``config``."""
    g = RoadGraph(n_nodes, random_edges(rng, n_nodes, p))
    adj = build_adjacency(g)
    subgraphs, spatial, temporal = [], [], []
    for _ in range(batch_size):
        sg = khop_subgraph(g, adj, int(rng.integers(n_nodes)), config.k)
        subgraphs.append(sg)
        spatial.append(rng.normal(size=(sg.num_nodes, config.spatial_dim)))
        temporal.append(rng.normal(size=(config.T, sg.num_nodes, config.temporal_dim)))
    external = rng.normal(size=(batch_size, config.external_dim))
    labels = rng.integers(0, 2, size=batch_size)
    return SampleBatch(subgraphs, spatial, temporal, external, labels)


SMALL_GEN = GenConfig(num_nodes=60, span_days=20, accident_rate=0.004)
SMALL_MODEL = ModelConfig(S=2, H=2, d=8, T=6, gru_depth=1)


@pytest.fixture(scope="session")
def small_bundle(tmp_path_factory):
    root = tmp_path_factory.mktemp("bundle")
    stats = synth_generate(SMALL_GEN, 3, root, audit_dir=tmp_path_factory.mktemp("audit"))
    return root, stats


@pytest.fixture(scope="session")
def small_prepared(small_bundle):
    ds, _ = prepare(small_bundle[0], T=SMALL_MODEL.T, seed=0)
    return ds


# acceptance criteria register here and are summarised after the run
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, text = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {text}")
