"""Quantitative explanation evaluation: sparsity, fidelity, sweeps.

Sparsity averages 1 - |important| / |edges| over the evaluated graphs.
Fidelity+ is the drop in a detection metric (F1-macro, accuracy, or
detection rate) when each graph's important edges are hard-removed from
message passing; metrics are always recomputed over all labeled edges
with the real encoder + GBDT pipeline, never the surrogate.

The toolkit evaluates one global test graph by default (K = 1); global
masks are built by combining per-target explanation weights with an
elementwise max, so an edge important to any explained instance stays
important globally.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .detect import DetectionMetrics, GbdtModel, evaluate, predict_proba
from .egsage import EncoderParams, edge_embedding_matrix, encode_nodes
from .errors import DataError
from .explain import ExplanationMask, apply_mask, binarize_mask, removal_weights
from .netgraph import FlowGraph

METRIC_NAMES = ("f1_macro", "accuracy", "detection_rate")


@dataclass(eq=False)
class EdgePipeline:
    """Frozen encoder + classifier with a pinned sampling realization."""

    encoder: EncoderParams
    gbdt: GbdtModel
    sample_seed: int
    sample_epoch: int

    def edge_probabilities(
        self, graph: FlowGraph, weights: np.ndarray | None = None, mode: str = "hard"
    ) -> np.ndarray:
        if weights is None:
            z = encode_nodes(graph, self.encoder, self.sample_seed, self.sample_epoch)
            q = edge_embedding_matrix(graph, z)
        else:
            q = apply_mask(
                graph, self.encoder, weights, self.sample_seed, self.sample_epoch, mode
            )
        return predict_proba(self.gbdt, q)

    def metrics(
        self, graph: FlowGraph, weights: np.ndarray | None = None, mode: str = "hard"
    ) -> DetectionMetrics:
        probs = self.edge_probabilities(graph, weights, mode)
        return evaluate((probs >= 0.5).astype(np.int64), graph.binary_labels())

    def metric(
        self,
        graph: FlowGraph,
        name: str,
        weights: np.ndarray | None = None,
        mode: str = "hard",
    ) -> float:
        if name not in METRIC_NAMES:
            raise DataError(f"unknown metric '{name}'; options: {METRIC_NAMES}")
        labels = graph.binary_labels()
        if name == "detection_rate" and int(labels.sum()) == 0:
            raise DataError("metric 'detection_rate' undefined: no actual attacks")
        return float(getattr(self.metrics(graph, weights, mode), name))


def sparsity(masks: list[ExplanationMask], graphs: list[FlowGraph]) -> float:
    """Mean over graphs of 1 - |important edges| / |all edges|."""
    if len(masks) != len(graphs) or not masks:
        raise DataError("need one mask per graph, at least one graph")
    total = 0.0
    for mask, graph in zip(masks, graphs):
        if graph.n_edges == 0:
            raise DataError("cannot compute sparsity of an empty graph")
        total += 1.0 - len(mask.important) / graph.n_edges
    return total / len(masks)


def fidelity_plus(
    pipeline: EdgePipeline,
    graphs: list[FlowGraph],
    masks: list[ExplanationMask],
    metric: str,
) -> float:
    """Mean metric drop after hard-removing each graph's important edges."""
    if len(masks) != len(graphs) or not masks:
        raise DataError("need one mask per graph, at least one graph")
    total = 0.0
    for mask, graph in zip(masks, graphs):
        base = pipeline.metric(graph, metric)
        if len(mask.important) == 0:
            continue  # complementary mask keeps everything: zero drop
        removed = pipeline.metric(
            graph, metric, weights=removal_weights(graph, mask.important), mode="hard"
        )
        total += base - removed
    return total / len(masks)


def combine_masks(
    per_target: list[ExplanationMask], graph: FlowGraph, sparsity_level: float
) -> ExplanationMask:
    """Global mask over all graph edges: elementwise max of target weights."""
    if not per_target:
        raise DataError("cannot combine an empty mask list")
    weights = np.zeros(graph.n_edges)
    for mask in per_target:
        np.maximum.at(weights, mask.edge_indices, mask.weights)
    domain = np.arange(graph.n_edges, dtype=np.int64)
    return ExplanationMask(
        target="global",
        edge_indices=domain,
        weights=weights,
        important=binarize_mask(domain, weights, sparsity_level),
        sparsity=sparsity_level,
    )


def rebinarize(mask: ExplanationMask, sparsity_level: float) -> ExplanationMask:
    return ExplanationMask(
        target=mask.target,
        edge_indices=mask.edge_indices,
        weights=mask.weights,
        important=binarize_mask(mask.edge_indices, mask.weights, sparsity_level),
        sparsity=sparsity_level,
    )


def make_random_mask(
    graph: FlowGraph, seed: int, sparsity_level: float
) -> ExplanationMask:
    """Uniform-random global weights; the control arm for fidelity sweeps."""
    rng = np.random.default_rng([seed, 773])
    weights = rng.uniform(0.0, 1.0, size=graph.n_edges)
    domain = np.arange(graph.n_edges, dtype=np.int64)
    return ExplanationMask(
        target="global",
        edge_indices=domain,
        weights=weights,
        important=binarize_mask(domain, weights, sparsity_level),
        sparsity=sparsity_level,
    )


def sweep(
    pipeline: EdgePipeline,
    graphs: list[FlowGraph],
    explainer_masks: dict[str, list[ExplanationMask]],
    sparsity_levels: list[float],
) -> list[dict]:
    """Fidelity+ of every explainer at every sparsity level and metric.

    ``explainer_masks`` maps an explainer name to one global (weights over
    all edges) mask per graph; masks are re-binarized at each level.
    Returns plot-ready rows {explainer, sparsity, metric, value}.
    """
    if sorted(sparsity_levels) != list(sparsity_levels) or len(
        set(sparsity_levels)
    ) != len(sparsity_levels):
        raise DataError("sparsity levels must be strictly increasing")
    if any(not 0.0 <= s < 1.0 for s in sparsity_levels):
        raise DataError("sparsity levels must lie in [0, 1)")
    rows: list[dict] = []
    for name in explainer_masks:
        masks = explainer_masks[name]
        if len(masks) != len(graphs):
            raise DataError(f"explainer '{name}' supplies {len(masks)} masks "
                            f"for {len(graphs)} graphs")
        for level in sparsity_levels:
            leveled = [rebinarize(m, level) for m in masks]
            for metric in METRIC_NAMES:
                rows.append(
                    {
                        "explainer": name,
                        "sparsity": level,
                        "metric": metric,
                        "value": fidelity_plus(pipeline, graphs, leveled, metric),
                    }
                )
    return rows


def write_sweep_csv(rows: list[dict], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["explainer", "sparsity", "metric", "value"])
        for row in rows:
            writer.writerow(
                [row["explainer"], repr(row["sparsity"]), row["metric"], repr(row["value"])]
            )


def class_distribution(
    masks: list[ExplanationMask], edge_labels: list[str | None], target_class: str
) -> dict:
    """Edge-class histogram over the masks' pooled important sets.

    An edge recurring across several explanations counts once per
    explanation it appears in: it is part of each of them, and hub edges
    shared by many targets would otherwise vanish from the distribution.
    """
    if not masks:
        raise DataError("class_distribution requires at least one mask")
    counts: dict[str, int] = {}
    total = 0
    for mask in masks:
        for e in mask.important:
            label = edge_labels[int(e)]
            label = label if label is not None else "(unlabeled)"
            counts[label] = counts.get(label, 0) + 1
            total += 1
    if total == 0:
        raise DataError("masks have empty important sets")
    return {
        "target_class": target_class,
        "n_targets": len(masks),
        "n_edges": total,
        "counts": dict(sorted(counts.items())),
        "shares": {k: v / total for k, v in sorted(counts.items())},
    }
