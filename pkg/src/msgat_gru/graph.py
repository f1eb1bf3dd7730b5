"""Road-network topology: CSR adjacency, hop frontiers and k-hop subgraphs."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

from .errors import ContractError, GraphValidationError, IngestionError

STATIC_COLUMNS = (
    "road_type",
    "lanes",
    "length_m",
    "speed_limit",
    "poi_school",
    "poi_shop",
    "poi_hospital",
    "poi_transit",
    "poi_other",
)


@dataclass(frozen=True)
class RoadGraph:
    """Undirected road network.

    ``static_attrs`` is an ``(num_nodes, len(STATIC_COLUMNS))`` array holding
    road attributes followed by POI counts for each segment.
    """

    num_nodes: int
    edges: np.ndarray
    static_attrs: np.ndarray | None = None

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "edges", edges)
        if self.static_attrs is not None:
            attrs = np.asarray(self.static_attrs, dtype=np.float64)
            if attrs.shape != (self.num_nodes, len(STATIC_COLUMNS)):
                raise GraphValidationError(
                    f"static_attrs shape {attrs.shape} != ({self.num_nodes}, {len(STATIC_COLUMNS)})"
                )
            object.__setattr__(self, "static_attrs", attrs)

    @property
    def num_edges(self) -> int:
        return len(self.edges)


@dataclass(frozen=True)
class SparseAdjacency:
    """Symmetric adjacency in compressed-sparse-row layout."""

    row_offsets: np.ndarray
    neighbor_ids: np.ndarray

    @property
    def num_nodes(self) -> int:
        return len(self.row_offsets) - 1

    def neighbors(self, i: int) -> np.ndarray:
        return self.neighbor_ids[self.row_offsets[i] : self.row_offsets[i + 1]]

    def degree(self, i: int) -> int:
        return int(self.row_offsets[i + 1] - self.row_offsets[i])

    def to_dense(self) -> np.ndarray:
        n = self.num_nodes
        dense = np.zeros((n, n), dtype=np.int8)
        rows = np.repeat(np.arange(n), np.diff(self.row_offsets))
        dense[rows, self.neighbor_ids] = 1
        return dense

    def to_scipy(self) -> csr_matrix:
        n = self.num_nodes
        data = np.ones(len(self.neighbor_ids))
        return csr_matrix((data, self.neighbor_ids, self.row_offsets), shape=(n, n))


@dataclass
class Subgraph:
    """Induced subgraph on the k-ball around ``center``.

    ``nodes`` holds original ids in ascending order; local id ``i`` refers
    to ``nodes[i]``.
    """

    center: int
    nodes: np.ndarray
    remap: dict
    local_edges: np.ndarray
    hop_of: np.ndarray
    _dist: np.ndarray | None = field(default=None, repr=False)

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def center_local(self) -> int:
        return self.remap[self.center]

    def distances(self) -> np.ndarray:
        """All-pairs shortest-path lengths inside the subgraph (-1 if unreachable)."""
        if self._dist is None:
            n = self.num_nodes
            if len(self.local_edges):
                e = self.local_edges
                rows = np.concatenate([e[:, 0], e[:, 1]])
                cols = np.concatenate([e[:, 1], e[:, 0]])
                mat = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
                dist = shortest_path(mat, unweighted=True, directed=False)
            else:
                dist = np.full((n, n), np.inf)
                np.fill_diagonal(dist, 0)
            dist[np.isinf(dist)] = -1
            self._dist = dist.astype(np.int64)
        return self._dist

    def ring_pairs(self, s: int) -> np.ndarray:
        """Attention pairs ``(target, source)`` for scale ``s``: every source at
        exactly distance ``s`` from its target, plus one self-pair per node."""
        dist = self.distances()
        tgt, src = np.nonzero(dist == s) if s > 0 else (np.empty(0, int), np.empty(0, int))
        selfs = np.arange(self.num_nodes)
        pairs = np.concatenate(
            [np.stack([tgt, src], axis=1), np.stack([selfs, selfs], axis=1)]
        ).astype(np.int64)
        order = np.lexsort((pairs[:, 1], pairs[:, 0]))
        return pairs[order]


def build_adjacency(graph: RoadGraph) -> SparseAdjacency:
    """Validate ``graph.edges`` and return the canonical symmetric CSR form."""
    n = graph.num_nodes
    edges = graph.edges
    seen = set()
    for i, j in edges.tolist():
        if not (0 <= i < n and 0 <= j < n):
            raise GraphValidationError(f"edge ({i}, {j}) has node id outside [0, {n})")
        if i == j:
            raise GraphValidationError(f"self-loop on node {i}")
        key = (i, j) if i < j else (j, i)
        if key in seen:
            raise GraphValidationError(f"duplicate edge ({key[0]}, {key[1]})")
        seen.add(key)
    if len(edges):
        src = np.concatenate([edges[:, 0], edges[:, 1]])
        dst = np.concatenate([edges[:, 1], edges[:, 0]])
        order = np.lexsort((dst, src))
        src, dst = src[order], dst[order]
    else:
        src = dst = np.empty(0, dtype=np.int64)
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=n), out=offsets[1:])
    return SparseAdjacency(offsets, dst.astype(np.int64))


def _check_node(adj: SparseAdjacency, node: int) -> None:
    if not 0 <= node < adj.num_nodes:
        raise IndexError(f"node {node} outside [0, {adj.num_nodes})")


def bfs_distances(adj: SparseAdjacency, center: int, max_depth: int | None = None) -> dict:
    """Shortest-path distance of every node reachable within ``max_depth``."""
    _check_node(adj, center)
    dist = {center: 0}
    queue = deque([center])
    while queue:
        u = queue.popleft()
        du = dist[u]
        if max_depth is not None and du >= max_depth:
            continue
        for v in adj.neighbors(u).tolist():
            if v not in dist:
                dist[v] = du + 1
                queue.append(v)
    return dist


def khop_frontier(adj: SparseAdjacency, center: int, s: int) -> np.ndarray:
    """Sorted ids of nodes at shortest-path distance exactly ``s`` from ``center``."""
    if s < 1:
        raise ContractError(f"hop count must be >= 1, got {s}")
    dist = bfs_distances(adj, center, s)
    return np.array(sorted(v for v, d in dist.items() if d == s), dtype=np.int64)


def khop_subgraph(graph: RoadGraph, adj: SparseAdjacency, center: int, k: int) -> Subgraph:
    """Induced subgraph on all nodes within ``k`` hops of ``center``."""
    if k < 1:
        raise ContractError(f"subgraph radius must be >= 1, got {k}")
    dist = bfs_distances(adj, center, k)
    nodes = np.array(sorted(dist), dtype=np.int64)
    remap = {int(v): i for i, v in enumerate(nodes.tolist())}
    local = []
    for v in nodes.tolist():
        lv = remap[v]
        for u in adj.neighbors(v).tolist():
            lu = remap.get(u)
            if lu is not None and lv < lu:
                local.append((lv, lu))
    local_edges = np.array(local, dtype=np.int64).reshape(-1, 2)
    hop_of = np.array([dist[v] for v in nodes.tolist()], dtype=np.int64)
    return Subgraph(int(center), nodes, remap, local_edges, hop_of)


def read_edge_list(path) -> tuple[int, np.ndarray]:
    """Parse a ``num_nodes=<N>`` header followed by ``i j`` lines."""
    path = Path(path)
    if not path.exists():
        raise IngestionError("file not found", path)
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith("num_nodes="):
            raise IngestionError("expected header 'num_nodes=<N>'", path, 1)
        try:
            n = int(header.split("=", 1)[1])
        except ValueError:
            raise IngestionError(f"bad node count in header {header!r}", path, 1) from None
        edges = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise IngestionError(f"expected 'i j', got {line!r}", path, lineno)
            try:
                edges.append((int(parts[0]), int(parts[1])))
            except ValueError:
                raise IngestionError(f"non-integer node id in {line!r}", path, lineno) from None
    return n, np.array(edges, dtype=np.int64).reshape(-1, 2)


def write_edge_list(path, num_nodes: int, edges: np.ndarray) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"num_nodes={num_nodes}\n")
        for i, j in np.asarray(edges).tolist():
            fh.write(f"{i} {j}\n")
