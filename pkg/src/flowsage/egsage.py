"""Edge-feature GraphSAGE encoder producing node and edge embeddings.

One message-passing layer (configurable depth, depth 1 is the supported
training contract): a node's sampled incident edges contribute messages
``concat(neighbor_state, edge_features)``, mean-pooled, concatenated with
the node's own state and pushed through a bias-free affine + ReLU. Edge
embeddings concatenate the two endpoint embeddings, source first.

Soft masking scales each edge's message by a weight while keeping the
mean's divisor (the sampled count) fixed; hard masking is graph surgery
(see FlowGraph.drop_edges) followed by ordinary encoding.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .netgraph import FlowGraph, NeighborSample
from .serialize import load_container, save_container

EMBEDDING_KIND = b"EMB_"
EMBEDDING_VERSION = 1
DEFAULT_HIDDEN = 256


@dataclass
class EncoderParams:
    """Weights of the message-passing encoder (no bias terms).

    Layer 1 has shape (hidden, 3d): node state (d) plus the mean of
    neighbor messages (d + d). Deeper layers, when configured, take
    (hidden, 2*hidden + d).
    """

    weights: list[np.ndarray]
    feature_dim: int
    hidden: int
    sample_size: int = 0  # 0 = full neighborhoods

    @property
    def depth(self) -> int:
        return len(self.weights)


def layer_input_dim(feature_dim: int, hidden: int, layer: int) -> int:
    prev = feature_dim if layer == 0 else hidden
    return prev + prev + feature_dim


def init_encoder(
    feature_dim: int,
    hidden: int = DEFAULT_HIDDEN,
    depth: int = 1,
    sample_size: int = 0,
    seed: int = 0,
) -> EncoderParams:
    """Seeded uniform(+-sqrt(6/(fan_in+fan_out))) initialization."""
    if depth < 1:
        raise DataError(f"depth must be >= 1, got {depth}")
    rng = np.random.default_rng([seed, 17])
    weights = []
    for k in range(depth):
        fan_in = layer_input_dim(feature_dim, hidden, k)
        bound = np.sqrt(6.0 / (fan_in + hidden))
        weights.append(rng.uniform(-bound, bound, size=(hidden, fan_in)))
    return EncoderParams(
        weights=weights, feature_dim=feature_dim, hidden=hidden, sample_size=sample_size
    )


@dataclass(eq=False)
class EdgeEmbedding:
    flow_id: int
    vector: np.ndarray


@dataclass(eq=False)
class LayerCache:
    flat_edges: np.ndarray
    flat_neighbors: np.ndarray
    segment_nodes: np.ndarray
    counts: np.ndarray
    raw_messages: np.ndarray
    concat_inputs: np.ndarray
    pre_activation: np.ndarray


@dataclass(eq=False)
class EncodeCache:
    graph: FlowGraph
    params: EncoderParams
    seed: int
    epoch: int
    edge_weights: np.ndarray | None
    layers: list[LayerCache]
    node_states: np.ndarray


def aggregate_neighborhood(
    graph: FlowGraph,
    v: int,
    sample: NeighborSample,
    states: np.ndarray,
    edge_weights: np.ndarray | None = None,
) -> np.ndarray:
    """Mean of ``concat(state_u, e_uv)`` over the sampled incident edges.

    Empty samples fall back to the zero vector (isolated nodes).
    """
    dim = states.shape[1] + graph.feature_dim
    if len(sample.edge_indices) == 0:
        return np.zeros(dim)
    msgs = np.hstack(
        [states[sample.neighbor_nodes], graph.edge_features[sample.edge_indices]]
    )
    if msgs.shape[1] != dim:
        raise DataError(f"message dim {msgs.shape[1]} != expected {dim}")
    if edge_weights is not None:
        msgs = msgs * edge_weights[sample.edge_indices][:, None]
    return msgs.mean(axis=0)


def _collect_samples(
    graph: FlowGraph, sample_size: int, seed: int, layer_epoch: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flattened sampled neighborhoods for every node.

    Nodes at or under the sample size reuse the graph's memoized full
    incidence; larger nodes draw per-node without-replacement samples
    keyed by (seed, node, layer_epoch), matching sample_neighbors.
    """
    flat_edges, flat_neighbors, counts = graph.incidence_arrays()
    if sample_size <= 0 or counts.size == 0 or counts.max() <= sample_size:
        return flat_edges, flat_neighbors, counts
    offsets = np.concatenate(([0], np.cumsum(counts)))
    edge_pieces: list[np.ndarray] = []
    neighbor_pieces: list[np.ndarray] = []
    out_counts = counts.copy()
    for v in range(graph.n_nodes):
        lo, hi = offsets[v], offsets[v + 1]
        if counts[v] <= sample_size:
            edge_pieces.append(flat_edges[lo:hi])
            neighbor_pieces.append(flat_neighbors[lo:hi])
        else:
            rng = np.random.default_rng([seed, v, layer_epoch])
            chosen = np.sort(rng.choice(counts[v], size=sample_size, replace=False))
            edge_pieces.append(flat_edges[lo:hi][chosen])
            neighbor_pieces.append(flat_neighbors[lo:hi][chosen])
            out_counts[v] = sample_size
    return (
        np.concatenate(edge_pieces),
        np.concatenate(neighbor_pieces),
        out_counts,
    )


def _layer_forward(
    graph: FlowGraph,
    states: np.ndarray,
    weight: np.ndarray,
    sample_size: int,
    seed: int,
    layer_epoch: int,
    edge_weights: np.ndarray | None,
) -> tuple[np.ndarray, LayerCache]:
    n = graph.n_nodes
    flat_edges, flat_neighbors, counts = _collect_samples(
        graph, sample_size, seed, layer_epoch
    )
    segment_nodes = np.repeat(np.arange(n), counts)

    raw = np.hstack([states[flat_neighbors], graph.edge_features[flat_edges]])
    weighted = raw if edge_weights is None else raw * edge_weights[flat_edges][:, None]

    agg = np.zeros((n, raw.shape[1]))
    nonempty = counts > 0
    if flat_edges.size:
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])[nonempty]
        sums = np.add.reduceat(weighted, starts, axis=0)
        agg[nonempty] = sums / counts[nonempty, None]

    concat = np.hstack([states, agg])
    pre = concat @ weight.T
    out = np.maximum(pre, 0.0)
    cache = LayerCache(
        flat_edges=flat_edges,
        flat_neighbors=flat_neighbors,
        segment_nodes=segment_nodes,
        counts=counts,
        raw_messages=raw,
        concat_inputs=concat,
        pre_activation=pre,
    )
    return out, cache


def encode_nodes(
    graph: FlowGraph,
    params: EncoderParams,
    seed: int,
    epoch: int,
    edge_weights: np.ndarray | None = None,
    return_cache: bool = False,
):
    """Per-node embeddings z_v; deterministic given (seed, epoch).

    ``edge_weights`` (length n_edges, values in [0, 1]) applies a soft
    mask to neighbor messages. With ``return_cache`` the saved forward
    state for :func:`encoder_backward` is also returned.
    """
    if graph.feature_dim != params.feature_dim:
        raise DataError(
            f"graph feature dim {graph.feature_dim} != encoder dim {params.feature_dim}"
        )
    if edge_weights is not None:
        edge_weights = np.asarray(edge_weights, dtype=np.float64)
        if edge_weights.shape != (graph.n_edges,):
            raise DataError(
                f"edge_weights shape {edge_weights.shape} != ({graph.n_edges},)"
            )
    states = graph.node_features()
    layers: list[LayerCache] = []
    for k, weight in enumerate(params.weights):
        states, cache = _layer_forward(
            graph,
            states,
            weight,
            params.sample_size,
            seed,
            epoch * params.depth + k,
            edge_weights,
        )
        layers.append(cache)
    if return_cache:
        return states, EncodeCache(
            graph=graph,
            params=params,
            seed=seed,
            epoch=epoch,
            edge_weights=edge_weights,
            layers=layers,
            node_states=states,
        )
    return states


def edge_embedding_matrix(graph: FlowGraph, node_states: np.ndarray) -> np.ndarray:
    """(E, 2*hidden) matrix: concat(z_src, z_dst) in edge-index order."""
    h = node_states.shape[1]
    out = np.empty((graph.n_edges, 2 * h))
    np.take(node_states, graph.edge_src, axis=0, out=out[:, :h])
    np.take(node_states, graph.edge_dst, axis=0, out=out[:, h:])
    return out


def encode_edges(graph: FlowGraph, node_states: np.ndarray) -> list[EdgeEmbedding]:
    matrix = edge_embedding_matrix(graph, node_states)
    return [
        EdgeEmbedding(flow_id=int(graph.flow_ids[e]), vector=matrix[e])
        for e in range(graph.n_edges)
    ]


def embedding_matrix(embeddings: list[EdgeEmbedding]) -> tuple[np.ndarray, np.ndarray]:
    ids = np.array([e.flow_id for e in embeddings], dtype=np.int64)
    return ids, np.stack([e.vector for e in embeddings])


@dataclass
class EncoderGradients:
    d_weights: list[np.ndarray]
    d_edge_weights: np.ndarray | None


def scatter_edge_gradient(graph: FlowGraph, d_edge: np.ndarray) -> np.ndarray:
    """Accumulate upstream edge-embedding gradients onto node embeddings."""
    hidden = d_edge.shape[1] // 2
    d_nodes = np.zeros((graph.n_nodes, hidden))
    src_group, dst_group = graph.scatter_groups()
    for (order, nodes, starts), sl in (
        (src_group, slice(0, hidden)),
        (dst_group, slice(hidden, 2 * hidden)),
    ):
        if order.size:
            sums = np.add.reduceat(d_edge[order, sl], starts, axis=0)
            d_nodes[nodes] += sums
    return d_nodes


def encoder_backward_nodes(
    cache: EncodeCache,
    d_nodes: np.ndarray,
    want_edge_weight_grad: bool = False,
) -> EncoderGradients:
    """Backward from gradients already accumulated on node embeddings."""
    if cache.params.depth != 1:
        raise NotImplementedError("encoder_backward supports depth-1 encoders only")
    layer = cache.layers[0]
    weight = cache.params.weights[0]
    d = cache.params.feature_dim

    d_pre = d_nodes * (layer.pre_activation > 0.0)
    d_weight = d_pre.T @ layer.concat_inputs

    d_edge_w = None
    if want_edge_weight_grad:
        d_concat = d_pre @ weight
        d_agg = d_concat[:, d:]
        d_edge_w = np.zeros(cache.graph.n_edges)
        if layer.flat_edges.size:
            seg = layer.segment_nodes
            per_msg = d_agg[seg] / layer.counts[seg][:, None]
            contrib = np.einsum("ij,ij->i", per_msg, layer.raw_messages)
            np.add.at(d_edge_w, layer.flat_edges, contrib)
    return EncoderGradients(d_weights=[d_weight], d_edge_weights=d_edge_w)


def encoder_backward(
    cache: EncodeCache,
    d_edge_embeddings: np.ndarray,
    graph: FlowGraph | None = None,
    want_edge_weight_grad: bool = False,
) -> EncoderGradients:
    """Exact gradients through concat, ReLU, affine, and the sampled mean.

    Only depth-1 encoders are supported (the training contract). The
    sampling realization is taken from the cache; passing a different
    graph than the one encoded is an error.
    """
    if graph is not None and graph is not cache.graph:
        raise DataError("backward called with a different graph than the forward pass")
    g = cache.graph
    if d_edge_embeddings.shape != (g.n_edges, 2 * cache.params.hidden):
        raise DataError(
            f"upstream gradient shape {d_edge_embeddings.shape} != "
            f"({g.n_edges}, {2 * cache.params.hidden})"
        )
    d_nodes = scatter_edge_gradient(g, d_edge_embeddings)
    return encoder_backward_nodes(cache, d_nodes, want_edge_weight_grad)


def save_embeddings(
    path: str | Path, flow_ids: np.ndarray, matrix: np.ndarray, meta: dict | None = None
) -> None:
    save_container(
        path,
        EMBEDDING_KIND,
        EMBEDDING_VERSION,
        dict(meta or {}),
        {"flow_ids": np.asarray(flow_ids, dtype=np.int64), "embeddings": matrix},
    )


def load_embeddings(path: str | Path) -> tuple[dict, np.ndarray, np.ndarray]:
    meta, arrays = load_container(path, EMBEDDING_KIND, EMBEDDING_VERSION)
    return meta, arrays["flow_ids"], arrays["embeddings"]


def export_embeddings_csv(
    path: str | Path, flow_ids: np.ndarray, matrix: np.ndarray
) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["flow_id"] + [f"z{i}" for i in range(matrix.shape[1])])
        for fid, row in zip(flow_ids, matrix):
            writer.writerow([int(fid)] + [repr(float(v)) for v in row])
