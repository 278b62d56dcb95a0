"""Edge-mask explanations of the detection pipeline.

The boosted-tree classifier is not differentiable, so a logistic surrogate
head is distilled from its predicted probabilities (quality gate: mean
absolute deviation <= 0.1 on the fit set). Explainers then optimize masks
against encoder + surrogate; all fidelity reporting elsewhere uses the
real encoder + GBDT pipeline.

Two explainers share one objective (keep the masked prediction close to
the original, plus size and entropy penalties):

* a shared explanation network mapping concat(candidate embedding, target
  embedding) to a mask logit, trained across instances with a concrete
  (sigmoid-of-noised-logit, annealed temperature) relaxation; and
* a per-instance baseline that optimizes a free logit vector directly.

Masked message passing is "soft": a candidate edge's message is scaled by
its mask weight while the sampled-mean divisor stays fixed, so a weight of
0 on one of two parallel edges halves that pair's mean contribution.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .egsage import EncoderParams, edge_embedding_matrix, encode_nodes
from .errors import DataError, NumericError
from .netgraph import FlowGraph, sample_neighbors
from .numcore import AdamState, adam_step, sigmoid

PROB_CLAMP = 1e-9


# ---------------------------------------------------------------------------
# Surrogate head


@dataclass(eq=False)
class SurrogateHead:
    """Logistic head distilled from GBDT probabilities on edge embeddings."""

    weights: np.ndarray
    bias: float
    mean_abs_dev: float = 0.0

    def predict_proba(self, embeddings: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
        return sigmoid(z @ self.weights + self.bias)


def surrogate_loss_and_grads(
    weights: np.ndarray, bias: float, z: np.ndarray, targets: np.ndarray
) -> tuple[float, np.ndarray, float]:
    """Mean soft-target cross-entropy and its exact gradients."""
    p = sigmoid(z @ weights + bias)
    pc = np.clip(p, PROB_CLAMP, 1 - PROB_CLAMP)
    loss = float(-(targets * np.log(pc) + (1 - targets) * np.log1p(-pc)).mean())
    d_logit = (p - targets) / z.shape[0]
    return loss, z.T @ d_logit, float(d_logit.sum())


def fit_surrogate(
    embeddings: np.ndarray,
    gbdt_probs: np.ndarray,
    epochs: int = 400,
    learning_rate: float = 0.05,
    gate: float = 0.1,
    seed: int = 0,
) -> SurrogateHead:
    """Distill the classifier's probabilities into a logistic head.

    Raises NumericError when the distillation gate (mean |surrogate -
    GBDT| <= gate) fails; retry with more epochs or a richer surrogate.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    t = np.clip(np.asarray(gbdt_probs, dtype=np.float64), PROB_CLAMP, 1 - PROB_CLAMP)
    if z.shape[0] < 10:
        raise DataError(f"surrogate needs >= 10 samples, got {z.shape[0]}")
    if z.shape[0] != t.shape[0]:
        raise DataError("embeddings and probabilities disagree on row count")
    del seed  # fit is deterministic; kept for interface stability
    w = np.zeros(z.shape[1])
    b = np.zeros(1)
    state = AdamState(learning_rate=learning_rate)
    for _ in range(epochs):
        _, dw, db = surrogate_loss_and_grads(w, float(b[0]), z, t)
        adam_step({"w": w, "b": b}, {"w": dw, "b": np.array([db])}, state)
    head = SurrogateHead(weights=w, bias=float(b[0]))
    head.mean_abs_dev = float(np.abs(head.predict_proba(z) - t).mean())
    if head.mean_abs_dev > gate:
        raise NumericError(
            f"surrogate gate violated: mean |surrogate - classifier| = "
            f"{head.mean_abs_dev:.4f} > {gate}; increase surrogate epochs or capacity"
        )
    return head


# ---------------------------------------------------------------------------
# Masks and masked inference


@dataclass(eq=False)
class ExplanationMask:
    """Per-edge importance weights plus the binarized important set.

    ``edge_indices`` is the mask's domain (graph edge indices);
    ``important`` is the top-(1 - sparsity) subset, at least one edge.
    """

    target: int | str
    edge_indices: np.ndarray
    weights: np.ndarray
    important: np.ndarray
    sparsity: float

    def to_document(self, graph: FlowGraph) -> dict:
        order = np.lexsort((self.edge_indices, -self.weights))
        important = set(int(e) for e in self.important)
        return {
            "target": self.target,
            "sparsity": self.sparsity,
            "edges": [
                {
                    "flow_id": int(graph.flow_ids[int(e)]),
                    "weight": float(self.weights[i]),
                    "rank": rank + 1,
                    "label": graph.edge_labels[int(e)],
                    "important": int(e) in important,
                }
                for rank, i in enumerate(order)
                for e in [self.edge_indices[i]]
            ],
        }


def binarize_mask(
    edge_indices: np.ndarray, weights: np.ndarray, sparsity: float
) -> np.ndarray:
    """Top-(1 - sparsity) edges by weight; |m| = round((1-s)*M), half up.

    Ties break toward the lower edge index. A selection that would be
    empty keeps exactly one edge, with a warning.
    """
    if not 0.0 <= sparsity < 1.0:
        raise DataError(f"sparsity must be in [0, 1), got {sparsity}")
    m = len(edge_indices)
    if m == 0:
        raise DataError("cannot binarize an empty mask domain")
    keep = int(np.floor((1.0 - sparsity) * m + 0.5))
    if keep == 0:
        warnings.warn("requested sparsity keeps no edges; keeping exactly 1")
        keep = 1
    order = np.lexsort((edge_indices, -weights))
    return np.sort(edge_indices[order[:keep]])


def computation_subgraph(graph: FlowGraph, edge: int, hops: int = 1) -> np.ndarray:
    """Edge indices that can influence the target's embedding (K-hop)."""
    if not 0 <= edge < graph.n_edges:
        raise DataError(f"edge {edge} not in graph")
    u, v = int(graph.edge_src[edge]), int(graph.edge_dst[edge])
    frontier = {u, v}
    edges: set[int] = set()
    for _ in range(hops):
        new_nodes: set[int] = set()
        for node in frontier:
            for e in graph.adjacency[node]:
                e = int(e)
                if e not in edges:
                    edges.add(e)
                    new_nodes.add(int(graph.edge_src[e]))
                    new_nodes.add(int(graph.edge_dst[e]))
        frontier = new_nodes
    return np.array(sorted(edges), dtype=np.int64)


def apply_mask(
    graph: FlowGraph,
    encoder: EncoderParams,
    weights: np.ndarray,
    sample_seed: int,
    sample_epoch: int,
    mode: str = "soft",
) -> np.ndarray:
    """Edge embeddings of every original edge under a masked graph.

    Soft mode scales messages by weight with the sampled-mean divisor
    fixed. Hard mode removes zero-weight edges from the topology and
    re-encodes; removed edges still receive embeddings from their
    endpoints (the mask affects message passing only).
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (graph.n_edges,):
        raise DataError(f"weights must cover all {graph.n_edges} edges")
    if mode == "soft":
        z = encode_nodes(graph, encoder, sample_seed, sample_epoch, edge_weights=weights)
        return edge_embedding_matrix(graph, z)
    if mode == "hard":
        removed = np.flatnonzero(weights == 0.0)
        masked_graph = graph.drop_edges(removed) if removed.size else graph
        z = encode_nodes(masked_graph, encoder, sample_seed, sample_epoch)
        return np.hstack([z[graph.edge_src], z[graph.edge_dst]])
    raise DataError(f"unknown mask mode '{mode}'")


def full_weights(graph: FlowGraph, edge_indices: np.ndarray, values) -> np.ndarray:
    """Weight vector over all edges: 1 outside the mask domain."""
    w = np.ones(graph.n_edges)
    w[edge_indices] = values
    return w


def removal_weights(graph: FlowGraph, important: np.ndarray) -> np.ndarray:
    """Hard-mask weights dropping the important set (the G^(1-m) graph)."""
    w = np.ones(graph.n_edges)
    w[np.asarray(important, dtype=np.int64)] = 0.0
    return w


# ---------------------------------------------------------------------------
# Shared local forward/backward used by both explainers


@dataclass(eq=False)
class ExplainContext:
    """Frozen pipeline state shared by explanation calls."""

    graph: FlowGraph
    encoder: EncoderParams
    surrogate: SurrogateHead
    sample_seed: int
    sample_epoch: int
    node_z: np.ndarray
    edge_q: np.ndarray
    _endpoint_cache: dict = field(default_factory=dict)

    @property
    def hidden(self) -> int:
        return self.encoder.hidden


def make_context(
    graph: FlowGraph,
    encoder: EncoderParams,
    surrogate: SurrogateHead,
    sample_seed: int,
    sample_epoch: int,
) -> ExplainContext:
    if encoder.depth != 1:
        raise NotImplementedError("explainers support depth-1 encoders only")
    z = encode_nodes(graph, encoder, sample_seed, sample_epoch)
    return ExplainContext(
        graph=graph,
        encoder=encoder,
        surrogate=surrogate,
        sample_seed=sample_seed,
        sample_epoch=sample_epoch,
        node_z=z,
        edge_q=edge_embedding_matrix(graph, z),
    )


def _endpoint_info(ctx: ExplainContext, node: int):
    """Sampled incident edges and raw messages for one node (cached)."""
    if node not in ctx._endpoint_cache:
        sample = sample_neighbors(
            ctx.graph, node, ctx.encoder.sample_size, ctx.sample_seed, ctx.sample_epoch
        )
        msgs = (
            np.hstack(
                [
                    ctx.graph.node_features()[sample.neighbor_nodes],
                    ctx.graph.edge_features[sample.edge_indices],
                ]
            )
            if len(sample.edge_indices)
            else np.zeros((0, 2 * ctx.graph.feature_dim))
        )
        ctx._endpoint_cache[node] = (sample.edge_indices, msgs)
    return ctx._endpoint_cache[node]


def _masked_prediction(
    ctx: ExplainContext, edge: int, cand: np.ndarray, mask: np.ndarray
) -> tuple[float, np.ndarray]:
    """Target's surrogate probability under a soft mask on cand edges.

    Returns (probability, d_prob/d_mask) with gradients flowing through
    the two endpoint encodings only (everything else is frozen).
    """
    g = ctx.graph
    d = ctx.encoder.feature_dim
    h = ctx.encoder.hidden
    w1 = ctx.encoder.weights[0]
    w1_self = w1[:, :d] @ np.ones(d)
    w1_agg = w1[:, d:]
    u, v = int(g.edge_src[edge]), int(g.edge_dst[edge])

    z_parts = []
    node_grads = []  # (sampled_edges, d_pre -> per-edge grad pieces)
    for node in (u, v):
        sampled, msgs = _endpoint_info(ctx, node)
        if len(sampled) == 0:
            pre = w1_self.copy()
            z_parts.append(np.maximum(pre, 0.0))
            node_grads.append(None)
            continue
        if len(cand):
            pos = np.searchsorted(cand, sampled)
            inside = (pos < len(cand)) & (
                cand[np.minimum(pos, len(cand) - 1)] == sampled
            )
        else:
            pos = np.zeros(len(sampled), dtype=np.int64)
            inside = np.zeros(len(sampled), dtype=bool)
        w_edges = np.ones(len(sampled))
        w_edges[inside] = mask[pos[inside]]
        agg = (w_edges @ msgs) / len(sampled)
        pre = w1_self + w1_agg @ agg
        z_parts.append(np.maximum(pre, 0.0))
        node_grads.append((sampled, msgs, pos, inside, pre))

    q = np.concatenate(z_parts)
    logit = float(q @ ctx.surrogate.weights + ctx.surrogate.bias)
    prob = sigmoid(logit)

    d_mask = np.zeros(len(cand))
    d_prob_d_logit = prob * (1.0 - prob)
    for which, info in enumerate(node_grads):
        if info is None:
            continue
        sampled, msgs, pos, inside, pre = info
        w_slice = ctx.surrogate.weights[which * h : (which + 1) * h]
        d_agg = w1_agg.T @ (w_slice * (pre > 0.0))
        per_edge = (msgs @ d_agg) / len(sampled)
        np.add.at(d_mask, pos[inside], d_prob_d_logit * per_edge[inside])
    return float(prob), d_mask


def _objective_terms(
    prob: float, p_orig: float, mask: np.ndarray, size_coeff: float, entropy_coeff: float
) -> tuple[float, float, np.ndarray]:
    """Cross-entropy to the original prediction plus mask regularizers.

    Returns (loss, d_loss/d_prob, d_regularizers/d_mask).
    """
    pc = min(max(prob, PROB_CLAMP), 1 - PROB_CLAMP)
    ce = -(p_orig * np.log(pc) + (1 - p_orig) * np.log1p(-pc))
    d_ce_d_prob = (pc - p_orig) / (pc * (1.0 - pc))
    mc = np.clip(mask, PROB_CLAMP, 1 - PROB_CLAMP)
    entropy = -(mc * np.log(mc) + (1 - mc) * np.log1p(-mc))
    loss = float(ce + size_coeff * mask.sum() + entropy_coeff * entropy.sum())
    d_reg = size_coeff + entropy_coeff * np.log((1.0 - mc) / mc)
    return loss, float(d_ce_d_prob), d_reg


# ---------------------------------------------------------------------------
# Shared explanation network (trained across instances)


@dataclass
class ExplainerConfig:
    hidden: int = 64
    tau_start: float = 5.0
    tau_end: float = 1.0
    size_coeff: float = 0.01
    entropy_coeff: float = 0.1
    epochs: int = 30
    learning_rate: float = 0.001
    train_targets: int = 150
    seed: int = 0


@dataclass(eq=False)
class ExplainerNet:
    """One-hidden-layer MLP from concat(candidate, target) embeddings to a logit."""

    w_hidden: np.ndarray
    b_hidden: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray
    config: ExplainerConfig
    loss_history: list[float] = field(default_factory=list)

    def logits(self, inputs: np.ndarray) -> np.ndarray:
        hid = np.maximum(inputs @ self.w_hidden.T + self.b_hidden, 0.0)
        return hid @ self.w_out + self.b_out[0]

    def params(self) -> dict[str, np.ndarray]:
        return {
            "w_hidden": self.w_hidden,
            "b_hidden": self.b_hidden,
            "w_out": self.w_out,
            "b_out": self.b_out,
        }


def init_explainer_net(embedding_dim: int, config: ExplainerConfig) -> ExplainerNet:
    in_dim = 2 * embedding_dim
    rng = np.random.default_rng([config.seed, 47])
    bound = np.sqrt(6.0 / (in_dim + config.hidden))
    w_hidden = rng.uniform(-bound, bound, size=(config.hidden, in_dim))
    bound_out = np.sqrt(6.0 / (config.hidden + 1))
    w_out = rng.uniform(-bound_out, bound_out, size=config.hidden)
    return ExplainerNet(
        w_hidden=w_hidden,
        b_hidden=np.zeros(config.hidden),
        w_out=w_out,
        b_out=np.zeros(1),
        config=config,
    )


def explainer_forward_backward(
    net: ExplainerNet, inputs: np.ndarray, d_logits: np.ndarray
) -> dict[str, np.ndarray]:
    """Exact parameter gradients for a batch of mask logits."""
    pre = inputs @ net.w_hidden.T + net.b_hidden
    hid = np.maximum(pre, 0.0)
    d_hid = np.outer(d_logits, net.w_out) * (pre > 0.0)
    return {
        "w_hidden": d_hid.T @ inputs,
        "b_hidden": d_hid.sum(axis=0),
        "w_out": hid.T @ d_logits,
        "b_out": np.array([d_logits.sum()]),
    }


TRAIN_CANDIDATE_CAP = 64


def _training_candidates(ctx: ExplainContext, edge: int, seed: int = 0) -> np.ndarray:
    """Incident edges of both endpoints under the encoding realization.

    Hub targets can have hundreds of candidates; training subsamples them
    (seeded per target) to bound the per-instance cost. The trained
    network still scores every subgraph edge at explanation time.
    """
    u, v = int(ctx.graph.edge_src[edge]), int(ctx.graph.edge_dst[edge])
    parts = [_endpoint_info(ctx, u)[0], _endpoint_info(ctx, v)[0]]
    cand = np.unique(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64)
    if cand.size > TRAIN_CANDIDATE_CAP:
        rng = np.random.default_rng([seed, 777, edge])
        keep = rng.choice(cand.size, size=TRAIN_CANDIDATE_CAP, replace=False)
        keep_mask = np.zeros(cand.size, dtype=bool)
        keep_mask[keep] = True
        # the target edge always participates in its own explanation
        pos = np.searchsorted(cand, edge)
        if pos < cand.size and cand[pos] == edge:
            keep_mask[pos] = True
        cand = cand[keep_mask]
    return cand


def default_train_targets(ctx: ExplainContext, count: int, seed: int) -> np.ndarray:
    """Seeded target sample, stratified by the surrogate's predicted class."""
    probs = ctx.surrogate.predict_proba(ctx.edge_q)
    attack = np.flatnonzero(probs >= 0.5)
    benign = np.flatnonzero(probs < 0.5)
    rng = np.random.default_rng([seed, 661])
    halves = []
    for pool, quota in ((attack, count // 2), (benign, count - count // 2)):
        if pool.size:
            take = min(quota, pool.size)
            halves.append(rng.choice(pool, size=take, replace=False))
    chosen = np.concatenate(halves) if halves else np.arange(ctx.graph.n_edges)[:count]
    return np.sort(chosen.astype(np.int64))


def train_pgexplainer(
    ctx: ExplainContext,
    config: ExplainerConfig | None = None,
    targets: np.ndarray | None = None,
) -> ExplainerNet:
    """Fit the shared explanation network across training instances.

    Instance masks are sampled with sigmoid((logit + logistic noise)/tau),
    tau annealed geometrically between the configured temperatures; the
    encoder and surrogate stay frozen.
    """
    config = config or ExplainerConfig()
    if targets is None:
        targets = default_train_targets(ctx, config.train_targets, config.seed)
    targets = np.asarray(targets, dtype=np.int64)
    net = init_explainer_net(2 * ctx.hidden, config)
    state = AdamState(learning_rate=config.learning_rate)

    contexts = []
    for t in targets:
        cand = _training_candidates(ctx, int(t), seed=config.seed)
        if cand.size == 0:
            continue
        inputs = np.hstack(
            [ctx.edge_q[cand], np.tile(ctx.edge_q[int(t)], (cand.size, 1))]
        )
        p_orig = float(ctx.surrogate.predict_proba(ctx.edge_q[int(t)])[0])
        contexts.append((int(t), cand, inputs, p_orig))
    if not contexts:
        raise DataError("no usable training targets (all isolated)")

    for epoch in range(config.epochs):
        if config.epochs == 1:
            tau = config.tau_end
        else:
            tau = config.tau_start * (config.tau_end / config.tau_start) ** (
                epoch / (config.epochs - 1)
            )
        epoch_loss = 0.0
        for idx, (t, cand, inputs, p_orig) in enumerate(contexts):
            omega = net.logits(inputs)
            rng = np.random.default_rng([config.seed, 555, epoch, idx])
            u = rng.uniform(1e-9, 1 - 1e-9, size=cand.size)
            noise = np.log(u) - np.log1p(-u)
            mask = sigmoid((omega + noise) / tau)
            prob, d_prob_d_mask = _masked_prediction(ctx, t, cand, mask)
            loss, d_ce_d_prob, d_reg = _objective_terms(
                prob, p_orig, mask, config.size_coeff, config.entropy_coeff
            )
            if not np.isfinite(loss):
                raise NumericError(f"non-finite explainer loss at epoch {epoch}")
            d_mask = d_ce_d_prob * d_prob_d_mask + d_reg
            d_omega = d_mask * mask * (1.0 - mask) / tau
            grads = explainer_forward_backward(net, inputs, d_omega)
            adam_step(net.params(), grads, state)
            epoch_loss += loss
        net.loss_history.append(epoch_loss / len(contexts))
    return net


def explain_edge(
    net: ExplainerNet,
    ctx: ExplainContext,
    edge: int,
    sparsity: float,
    hops: int = 1,
) -> ExplanationMask:
    """Deterministic mask over the target's computation subgraph.

    Weights are sigmoid(logit) with sampling noise disabled.
    """
    cand = computation_subgraph(ctx.graph, edge, hops=hops)
    weights = np.empty(cand.size)
    target_emb = ctx.edge_q[edge]
    for start in range(0, cand.size, 512):
        chunk = cand[start : start + 512]
        inputs = np.hstack([ctx.edge_q[chunk], np.tile(target_emb, (chunk.size, 1))])
        weights[start : start + 512] = sigmoid(net.logits(inputs))
    return ExplanationMask(
        target=int(ctx.graph.flow_ids[edge]),
        edge_indices=cand,
        weights=weights,
        important=binarize_mask(cand, weights, sparsity),
        sparsity=sparsity,
    )


# ---------------------------------------------------------------------------
# Per-instance baseline (free mask, no shared network)


@dataclass
class GnnExplainerConfig:
    """Per-instance optimization needs the size penalty to actually bind;
    with a looser budget every weight saturates near 1 and the ranking
    degenerates to noise."""

    steps: int = 300
    learning_rate: float = 0.05
    size_coeff: float = 0.05
    entropy_coeff: float = 0.1


def explain_gnnexplainer(
    ctx: ExplainContext,
    edge: int,
    sparsity: float,
    config: GnnExplainerConfig | None = None,
    hops: int = 1,
) -> ExplanationMask:
    """Optimize a free mask-logit vector for a single instance.

    Identical objective to the shared-network explainer; zero steps leaves
    the uniform sigmoid(0) = 0.5 mask.
    """
    config = config or GnnExplainerConfig()
    cand = computation_subgraph(ctx.graph, edge, hops=hops)
    if cand.size == 0:
        raise DataError(f"target edge {edge} has an empty computation subgraph")
    p_orig = float(ctx.surrogate.predict_proba(ctx.edge_q[edge])[0])
    omega = np.zeros(cand.size)
    state = AdamState(learning_rate=config.learning_rate)
    for _ in range(config.steps):
        mask = sigmoid(omega)
        prob, d_prob_d_mask = _masked_prediction(ctx, edge, cand, mask)
        _, d_ce_d_prob, d_reg = _objective_terms(
            prob, p_orig, mask, config.size_coeff, config.entropy_coeff
        )
        d_mask = d_ce_d_prob * d_prob_d_mask + d_reg
        d_omega = d_mask * mask * (1.0 - mask)
        adam_step({"omega": omega}, {"omega": d_omega}, state)
    weights = sigmoid(omega)
    return ExplanationMask(
        target=int(ctx.graph.flow_ids[edge]),
        edge_indices=cand,
        weights=weights,
        important=binarize_mask(cand, weights, sparsity),
        sparsity=sparsity,
    )
