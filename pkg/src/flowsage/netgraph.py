"""Attributed flow multigraph and deterministic neighbor sampling.

Nodes are endpoint strings (indexed in lexicographic order so graph
construction is stable under record permutation); each flow record becomes
one directed edge carrying the flow's feature vector. Message passing
treats edges as undirected: a node's neighborhood is every incident edge,
in or out. Node features are the all-ones vector with the edge-feature
dimension.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .flowdata import FlowDataset
from .serialize import load_container, save_container

GRAPH_KIND = b"GRPH"
GRAPH_VERSION = 1
# 0 disables neighbor sampling: every incident edge aggregates (the mean is
# then sampling-independent and fidelity of edge removal is exact)
DEFAULT_SAMPLE_SIZE = 0


@dataclass(eq=False)
class FlowGraph:
    """Immutable multigraph over endpoints; parallel edges and loops allowed.

    ``adjacency[v]`` lists incident edge indices in ascending order; a
    self-loop appears once, so the list lengths sum to 2|E| - n_loops.
    """

    node_ids: list[str]
    edge_src: np.ndarray
    edge_dst: np.ndarray
    edge_features: np.ndarray
    flow_ids: np.ndarray
    edge_labels: list[str | None]
    adjacency: list[np.ndarray]
    benign_label: str = "Benign"
    # memoized topology views; safe because the graph is immutable
    _incidence: tuple | None = field(default=None, init=False, repr=False)
    _scatter: tuple | None = field(default=None, init=False, repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def n_edges(self) -> int:
        return int(self.edge_features.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.edge_features.shape[1])

    def node_features(self) -> np.ndarray:
        return np.ones((self.n_nodes, self.feature_dim))

    def degree(self, v: int) -> int:
        return len(self.adjacency[v])

    def other_endpoint(self, edge: int, v: int) -> int:
        s, d = int(self.edge_src[edge]), int(self.edge_dst[edge])
        return d if s == v else s

    def incidence_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Full neighborhoods flattened node by node.

        Returns (edges, neighbor_nodes, counts): the adjacency lists
        concatenated in node order, the opposite endpoint of each entry,
        and each node's incident-edge count.
        """
        if self._incidence is None:
            counts = np.array([len(a) for a in self.adjacency], dtype=np.int64)
            flat = (
                np.concatenate(self.adjacency)
                if counts.sum()
                else np.zeros(0, dtype=np.int64)
            )
            centers = np.repeat(np.arange(self.n_nodes), counts)
            s = self.edge_src[flat]
            neighbors = np.where(s == centers, self.edge_dst[flat], s)
            self._incidence = (flat, neighbors, counts)
        return self._incidence

    def scatter_groups(self) -> tuple:
        """Stable groupings of edges by src and by dst, for segment sums."""
        if self._scatter is None:
            groups = []
            for key in (self.edge_src, self.edge_dst):
                if key.size == 0:
                    empty = np.zeros(0, dtype=np.int64)
                    groups.append((empty, empty, empty))
                    continue
                order = np.argsort(key, kind="stable")
                sorted_keys = key[order]
                starts = np.flatnonzero(
                    np.concatenate(([True], sorted_keys[1:] != sorted_keys[:-1]))
                )
                groups.append((order, sorted_keys[starts], starts))
            self._scatter = tuple(groups)
        return self._scatter

    def flow_index(self) -> dict[int, int]:
        """Map flow_id -> edge index."""
        return {int(fid): i for i, fid in enumerate(self.flow_ids)}

    def binary_labels(self) -> np.ndarray:
        if any(lbl is None for lbl in self.edge_labels):
            raise DataError("graph contains unlabeled edges")
        return np.array(
            [0 if lbl == self.benign_label else 1 for lbl in self.edge_labels],
            dtype=np.int64,
        )

    def drop_edges(self, edge_indices) -> "FlowGraph":
        """Copy of the graph with the given edges removed from topology."""
        drop = np.zeros(self.n_edges, dtype=bool)
        drop[np.asarray(edge_indices, dtype=np.int64)] = True
        keep = ~drop
        return _assemble(
            self.node_ids,
            self.edge_src[keep],
            self.edge_dst[keep],
            self.edge_features[keep],
            self.flow_ids[keep],
            [lbl for lbl, k in zip(self.edge_labels, keep) if k],
            self.benign_label,
        )


def _assemble(
    node_ids, src, dst, features, flow_ids, labels, benign_label
) -> FlowGraph:
    n = len(node_ids)
    incident: list[list[int]] = [[] for _ in range(n)]
    for e in range(len(src)):
        s, d = int(src[e]), int(dst[e])
        incident[s].append(e)
        if d != s:
            incident[d].append(e)
    adjacency = [np.array(lst, dtype=np.int64) for lst in incident]
    return FlowGraph(
        node_ids=list(node_ids),
        edge_src=np.asarray(src, dtype=np.int64),
        edge_dst=np.asarray(dst, dtype=np.int64),
        edge_features=np.asarray(features, dtype=np.float64),
        flow_ids=np.asarray(flow_ids, dtype=np.int64),
        edge_labels=list(labels),
        adjacency=adjacency,
        benign_label=benign_label,
    )


def build_graph(dataset: FlowDataset) -> FlowGraph:
    """One node per distinct endpoint, one edge per record (src -> dst)."""
    feats = dataset.features()
    if not np.all(np.isfinite(feats)):
        raise DataError("records must be preprocessed: non-finite features found")
    endpoints = sorted({r.src for r in dataset.records} | {r.dst for r in dataset.records})
    index = {ep: i for i, ep in enumerate(endpoints)}
    src = np.array([index[r.src] for r in dataset.records], dtype=np.int64)
    dst = np.array([index[r.dst] for r in dataset.records], dtype=np.int64)
    flow_ids = np.array([r.flow_id for r in dataset.records], dtype=np.int64)
    return _assemble(
        endpoints, src, dst, feats, flow_ids, dataset.labels(), dataset.benign_label
    )


@dataclass
class NeighborSample:
    """Sampled incident edges of one node for a given (seed, epoch)."""

    node: int
    edge_indices: np.ndarray
    neighbor_nodes: np.ndarray


def sample_neighbors(
    graph: FlowGraph, v: int, sample_size: int, seed: int, epoch: int
) -> NeighborSample:
    """Uniform without-replacement sample of v's incident edges.

    Returns the full neighborhood when degree <= sample_size or when
    sample_size is 0 (sampling disabled). The RNG is keyed by (seed,
    node, epoch), so parallel samplers share no state and repeated calls
    are identical.
    """
    if not 0 <= v < graph.n_nodes:
        raise DataError(f"node {v} not in graph")
    incident = graph.adjacency[v]
    if sample_size > 0 and len(incident) > sample_size:
        rng = np.random.default_rng([seed, v, epoch])
        chosen = rng.choice(len(incident), size=sample_size, replace=False)
        incident = incident[np.sort(chosen)]
    s = graph.edge_src[incident]
    neighbors = np.where(s == v, graph.edge_dst[incident], s)
    return NeighborSample(node=v, edge_indices=incident.copy(), neighbor_nodes=neighbors)


def sample_all_neighbors(
    graph: FlowGraph, sample_size: int, seed: int, epoch: int
) -> list[NeighborSample]:
    return [
        sample_neighbors(graph, v, sample_size, seed, epoch)
        for v in range(graph.n_nodes)
    ]


def save_graph(graph: FlowGraph, path: str | Path, meta: dict | None = None) -> None:
    labels = [lbl if lbl is not None else "" for lbl in graph.edge_labels]
    doc = dict(meta or {})
    doc["node_ids"] = graph.node_ids
    doc["edge_labels"] = labels
    doc["benign_label"] = graph.benign_label
    save_container(
        path,
        GRAPH_KIND,
        GRAPH_VERSION,
        doc,
        {
            "edge_src": graph.edge_src,
            "edge_dst": graph.edge_dst,
            "edge_features": graph.edge_features,
            "flow_ids": graph.flow_ids,
        },
    )


def load_graph(path: str | Path) -> FlowGraph:
    meta, arrays = load_container(path, GRAPH_KIND, GRAPH_VERSION)
    labels = [lbl if lbl != "" else None for lbl in meta["edge_labels"]]
    return _assemble(
        meta["node_ids"],
        arrays["edge_src"],
        arrays["edge_dst"],
        arrays["edge_features"],
        arrays["flow_ids"],
        labels,
        meta.get("benign_label", "Benign"),
    )


def graph_debug_json(graph: FlowGraph) -> str:
    """Human-inspectable dump; not a round-trip format."""
    return json.dumps(
        {
            "n_nodes": graph.n_nodes,
            "n_edges": graph.n_edges,
            "feature_dim": graph.feature_dim,
            "nodes": graph.node_ids,
            "edges": [
                {
                    "src": graph.node_ids[int(graph.edge_src[e])],
                    "dst": graph.node_ids[int(graph.edge_dst[e])],
                    "flow_id": int(graph.flow_ids[e]),
                    "label": graph.edge_labels[e],
                }
                for e in range(graph.n_edges)
            ],
        },
        indent=1,
        sort_keys=True,
    )
