"""Self-supervised encoder training via Deep Graph Infomax over edges.

A corruption pass permutes edge feature vectors across edge indices
(topology untouched), the readout squashes the mean real edge embedding
through a sigmoid into a global summary, and a bilinear discriminator
scores embeddings against that summary. Minimizing binary cross-entropy
(real -> 1, corrupted -> 0) trains encoder and discriminator jointly with
Adam. Gradients are hand-derived; see tests for finite-difference checks.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .egsage import (
    EncoderParams,
    edge_embedding_matrix,
    encode_nodes,
    encoder_backward_nodes,
    init_encoder,
)
from .errors import DataError, NumericError
from .netgraph import FlowGraph
from .numcore import AdamState, adam_step, sigmoid
from .serialize import load_container, save_container

MODEL_KIND = b"DGIM"
MODEL_VERSION = 1
SCORE_CLAMP = 1e-12


@dataclass
class DgiConfig:
    epochs: int = 100
    learning_rate: float = 0.001
    seed: int = 0
    hidden: int = 256
    depth: int = 1
    sample_size: int = 0


@dataclass(eq=False)
class DgiModel:
    encoder: EncoderParams
    disc_weight: np.ndarray
    config: DgiConfig
    loss_history: list[float] = field(default_factory=list)

    @property
    def embedding_dim(self) -> int:
        return 2 * self.encoder.hidden


def corrupt(graph: FlowGraph, seed) -> FlowGraph:
    """Negative sample: same topology, edge feature rows permuted.

    The permutation is uniform over edge indices and deterministic per
    seed. Labels and flow ids keep their original positions; they no
    longer describe the permuted features.
    """
    if graph.n_edges == 0:
        raise DataError("cannot corrupt an empty graph")
    if graph.n_edges == 1:
        warnings.warn("single-edge graph: corruption permutation is the identity")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(graph.n_edges)
    corrupted = FlowGraph(
        node_ids=graph.node_ids,
        edge_src=graph.edge_src,
        edge_dst=graph.edge_dst,
        edge_features=graph.edge_features[perm],
        flow_ids=graph.flow_ids,
        edge_labels=list(graph.edge_labels),
        adjacency=graph.adjacency,
        benign_label=graph.benign_label,
    )
    # topology is shared, so the memoized views carry over
    corrupted._incidence = graph.incidence_arrays()
    corrupted._scatter = graph.scatter_groups()
    return corrupted


def readout(edge_embeddings: np.ndarray) -> np.ndarray:
    """Global summary: sigmoid of the elementwise mean embedding."""
    if edge_embeddings.shape[0] == 0:
        raise DataError("readout requires at least one edge embedding")
    return sigmoid(edge_embeddings.mean(axis=0))


def discriminate(disc_weight: np.ndarray, z: np.ndarray, summary: np.ndarray) -> float:
    """Bilinear score sigmoid(z^T W s), strictly inside (0, 1)."""
    if z.shape[0] != disc_weight.shape[0] or summary.shape[0] != disc_weight.shape[1]:
        raise DataError(
            f"shape mismatch: disc is {disc_weight.shape}, z {z.shape}, s {summary.shape}"
        )
    return float(sigmoid(z @ disc_weight @ summary))


def discriminate_all(
    disc_weight: np.ndarray, embeddings: np.ndarray, summary: np.ndarray
) -> np.ndarray:
    return sigmoid(embeddings @ (disc_weight @ summary))


def dgi_loss(scores_real, scores_corrupt) -> float:
    """Mean binary cross-entropy: real scores toward 1, corrupted toward 0."""
    p = np.clip(np.asarray(scores_real, dtype=np.float64), SCORE_CLAMP, 1 - SCORE_CLAMP)
    q = np.clip(
        np.asarray(scores_corrupt, dtype=np.float64), SCORE_CLAMP, 1 - SCORE_CLAMP
    )
    if p.size == 0 or q.size == 0:
        raise DataError("dgi_loss requires non-empty score lists")
    total = p.size + q.size
    return float(-(np.log(p).sum() + np.log1p(-q).sum()) / total)


def loss_and_grads(
    graph: FlowGraph,
    corrupted: FlowGraph,
    encoder: EncoderParams,
    disc_weight: np.ndarray,
    seed: int,
    epoch: int,
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """One full-batch DGI forward/backward.

    Returns (loss, d_encoder_w1, d_disc, scores_real, scores_corrupt).
    Both graphs share topology, so the (seed, epoch) sampling realization
    is identical for the real and corrupted passes.

    Edge embeddings are concat(z_src, z_dst), so every edge-level quantity
    factors into per-node terms: logits gather two per-node dot products,
    and the upstream gradient on edge embeddings is low-rank. The (E, 2h)
    edge matrix is never materialized here.
    """
    z_real, cache_real = encode_nodes(graph, encoder, seed, epoch, return_cache=True)
    z_cor, cache_cor = encode_nodes(corrupted, encoder, seed, epoch, return_cache=True)
    src, dst = graph.edge_src, graph.edge_dst
    n, n_edges = graph.n_nodes, graph.n_edges
    hidden = encoder.hidden

    deg_out = np.bincount(src, minlength=n).astype(np.float64)
    deg_in = np.bincount(dst, minlength=n).astype(np.float64)
    mu = np.concatenate([z_real.T @ deg_out, z_real.T @ deg_in]) / n_edges
    summary = sigmoid(mu)
    u = disc_weight @ summary
    u_src, u_dst = u[:hidden], u[hidden:]

    scores_real = sigmoid((z_real @ u_src)[src] + (z_real @ u_dst)[dst])
    scores_cor = sigmoid((z_cor @ u_src)[src] + (z_cor @ u_dst)[dst])
    loss = dgi_loss(scores_real, scores_cor)

    total = scores_real.size + scores_cor.size
    d_logit_real = -(1.0 - scores_real) / total
    d_logit_cor = scores_cor / total

    dlr_src = np.bincount(src, weights=d_logit_real, minlength=n)
    dlr_dst = np.bincount(dst, weights=d_logit_real, minlength=n)
    dlc_src = np.bincount(src, weights=d_logit_cor, minlength=n)
    dlc_dst = np.bincount(dst, weights=d_logit_cor, minlength=n)

    zsum = np.concatenate(
        [z_real.T @ dlr_src + z_cor.T @ dlc_src, z_real.T @ dlr_dst + z_cor.T @ dlc_dst]
    )
    d_disc = np.outer(zsum, summary)
    d_summary = disc_weight.T @ zsum
    d_mu = d_summary * summary * (1.0 - summary)
    dmu_src, dmu_dst = d_mu[:hidden], d_mu[hidden:]

    d_nodes_real = (
        np.outer(dlr_src, u_src)
        + np.outer(dlr_dst, u_dst)
        + np.outer(deg_out, dmu_src) / n_edges
        + np.outer(deg_in, dmu_dst) / n_edges
    )
    d_nodes_cor = np.outer(dlc_src, u_src) + np.outer(dlc_dst, u_dst)

    d_w_real = encoder_backward_nodes(cache_real, d_nodes_real).d_weights[0]
    d_w_cor = encoder_backward_nodes(cache_cor, d_nodes_cor).d_weights[0]
    return loss, d_w_real + d_w_cor, d_disc, scores_real, scores_cor


def init_discriminator(hidden: int, seed: int) -> np.ndarray:
    dim = 2 * hidden
    bound = np.sqrt(6.0 / (dim + dim))
    rng = np.random.default_rng([seed, 23])
    return rng.uniform(-bound, bound, size=(dim, dim))


def train(
    graph: FlowGraph, config: DgiConfig, encoder: EncoderParams | None = None
) -> DgiModel:
    """Train encoder + discriminator with Adam at the configured rate.

    Each epoch corrupts with a fresh derived seed, encodes both graphs
    under the epoch's sampling realization, and applies one full-batch
    update. Zero epochs returns the initialized model unchanged.
    """
    if graph.n_edges == 0:
        raise DataError("cannot train on an empty graph")
    if encoder is None:
        encoder = init_encoder(
            graph.feature_dim,
            hidden=config.hidden,
            depth=config.depth,
            sample_size=config.sample_size,
            seed=config.seed,
        )
    disc = init_discriminator(encoder.hidden, config.seed)
    model = DgiModel(encoder=encoder, disc_weight=disc, config=config)
    state = AdamState(learning_rate=config.learning_rate)
    for epoch in range(config.epochs):
        corrupted = corrupt(graph, [config.seed, 101, epoch])
        loss, d_w, d_disc, _, _ = loss_and_grads(
            graph, corrupted, encoder, disc, config.seed, epoch
        )
        if not np.isfinite(loss):
            raise NumericError(
                f"non-finite DGI loss at epoch {epoch}: {loss!r}; "
                f"|W1|max={np.abs(encoder.weights[0]).max():.3e}, "
                f"|disc|max={np.abs(disc).max():.3e}"
            )
        adam_step(
            {"encoder.w1": encoder.weights[0], "disc": disc},
            {"encoder.w1": d_w, "disc": d_disc},
            state,
        )
        model.loss_history.append(loss)
    return model


def evaluate_scores(
    model: DgiModel, graph: FlowGraph, seed: int, epoch: int, corruption_seed
) -> tuple[np.ndarray, np.ndarray]:
    """Scores for real edges and for a held-out corruption of the graph."""
    z = encode_nodes(graph, model.encoder, seed, epoch)
    q = edge_embedding_matrix(graph, z)
    summary = readout(q)
    corrupted = corrupt(graph, corruption_seed)
    z_cor = encode_nodes(corrupted, model.encoder, seed, epoch)
    q_cor = edge_embedding_matrix(corrupted, z_cor)
    return (
        discriminate_all(model.disc_weight, q, summary),
        discriminate_all(model.disc_weight, q_cor, summary),
    )


def discriminator_auc(
    model: DgiModel, graph: FlowGraph, n_corruptions: int, seed: int, epoch: int
) -> float:
    """Rank-based AUC of real-vs-corrupted scores over fresh corruptions."""
    pos: list[np.ndarray] = []
    neg: list[np.ndarray] = []
    for i in range(n_corruptions):
        p, q = evaluate_scores(model, graph, seed, epoch, [seed, 7919, i])
        pos.append(p)
        neg.append(q)
    p = np.concatenate(pos)
    q = np.concatenate(neg)
    combined = np.concatenate([p, q])
    order = np.argsort(combined, kind="stable")
    ranks = np.empty(combined.size)
    ranks[order] = np.arange(1, combined.size + 1)
    # midranks for ties
    sorted_vals = combined[order]
    i = 0
    while i < sorted_vals.size:
        j = i
        while j + 1 < sorted_vals.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        if j > i:
            ranks[order[i : j + 1]] = 0.5 * (i + 1 + j + 1)
        i = j + 1
    r_pos = ranks[: p.size].sum()
    return float((r_pos - p.size * (p.size + 1) / 2) / (p.size * q.size))


def save_model(model: DgiModel, path: str | Path, meta: dict | None = None) -> None:
    doc = dict(meta or {})
    doc.update(
        {
            "hidden": model.encoder.hidden,
            "feature_dim": model.encoder.feature_dim,
            "sample_size": model.encoder.sample_size,
            "depth": model.encoder.depth,
            "config": {
                "epochs": model.config.epochs,
                "learning_rate": model.config.learning_rate,
                "seed": model.config.seed,
                "hidden": model.config.hidden,
                "depth": model.config.depth,
                "sample_size": model.config.sample_size,
            },
            "loss_history": model.loss_history,
        }
    )
    arrays = {f"encoder.w{k}": w for k, w in enumerate(model.encoder.weights)}
    arrays["disc"] = model.disc_weight
    save_container(path, MODEL_KIND, MODEL_VERSION, doc, arrays)


def load_model(path: str | Path) -> DgiModel:
    meta, arrays = load_container(path, MODEL_KIND, MODEL_VERSION)
    cfg = meta["config"]
    config = DgiConfig(
        epochs=cfg["epochs"],
        learning_rate=cfg["learning_rate"],
        seed=cfg["seed"],
        hidden=cfg["hidden"],
        depth=cfg["depth"],
        sample_size=cfg["sample_size"],
    )
    weights = [arrays[f"encoder.w{k}"] for k in range(meta["depth"])]
    encoder = EncoderParams(
        weights=weights,
        feature_dim=meta["feature_dim"],
        hidden=meta["hidden"],
        sample_size=meta["sample_size"],
    )
    return DgiModel(
        encoder=encoder,
        disc_weight=arrays["disc"],
        config=config,
        loss_history=list(meta["loss_history"]),
    )
