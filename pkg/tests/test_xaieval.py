import numpy as np
import pytest

from flowsage.errors import DataError
from flowsage.explain import ExplanationMask, binarize_mask
from flowsage.flowdata import FlowDataset, FlowRecord
from flowsage.netgraph import build_graph
from flowsage.xaieval import (
    EdgePipeline,
    class_distribution,
    combine_masks,
    fidelity_plus,
    make_random_mask,
    rebinarize,
    sparsity,
    sweep,
    write_sweep_csv,
)


def graph_with(n_edges, labels=None):
    labels = labels or ["Benign"] * n_edges
    records = [
        FlowRecord(i, f"h{i % 4}", f"h{(i + 1) % 4}", np.array([float(i)]), lbl)
        for i, lbl in enumerate(labels)
    ]
    return build_graph(FlowDataset(records=records, feature_names=["f"]))


def mask_of(graph, important, weights=None, spars=0.5):
    domain = np.arange(graph.n_edges, dtype=np.int64)
    w = weights if weights is not None else np.linspace(0.1, 0.9, graph.n_edges)
    return ExplanationMask(
        target="global",
        edge_indices=domain,
        weights=np.asarray(w, dtype=np.float64),
        important=np.asarray(important, dtype=np.int64),
        sparsity=spars,
    )


class TestSparsity:
    def test_single_graph_formula(self):
        g = graph_with(10)
        assert sparsity([mask_of(g, [3])], [g]) == pytest.approx(0.9)

    def test_all_edges_zero(self):
        g = graph_with(6)
        assert sparsity([mask_of(g, list(range(6)))], [g]) == 0.0

    def test_mean_over_graphs(self):
        g1, g2 = graph_with(10), graph_with(10)
        masks = [mask_of(g1, [0, 1]), mask_of(g2, [0, 1, 2, 3])]
        assert sparsity(masks, [g1, g2]) == pytest.approx(0.7)

    def test_monotone_in_mask_size(self):
        g = graph_with(10)
        values = [
            sparsity([mask_of(g, list(range(k)))], [g]) for k in range(1, 10)
        ]
        assert values == sorted(values, reverse=True)

    def test_count_mismatch(self):
        g = graph_with(3)
        with pytest.raises(DataError):
            sparsity([mask_of(g, [0])], [g, g])


class TestFidelity:
    def test_empty_mask_zero_fidelity(self, star_pipeline):
        tp = star_pipeline
        pipeline = EdgePipeline(
            encoder=tp.model.encoder,
            gbdt=tp.gbdt,
            sample_seed=tp.seed,
            sample_epoch=tp.encode_epoch,
        )
        empty = ExplanationMask(
            target="global",
            edge_indices=np.arange(tp.graph.n_edges),
            weights=np.full(tp.graph.n_edges, 0.5),
            important=np.zeros(0, dtype=np.int64),
            sparsity=1.0,
        )
        for metric in ("f1_macro", "accuracy", "detection_rate"):
            assert fidelity_plus(pipeline, [tp.graph], [empty], metric) == 0.0

    def test_definition_arithmetic(self):
        # fidelity is the plain difference of metric values, averaged
        class Stub(EdgePipeline):
            def __init__(self):
                self.calls = 0

            def metric(self, graph, name, weights=None, mode="hard"):
                return 0.99 if weights is None else 0.80

        g = graph_with(5)
        val = fidelity_plus(Stub(), [g], [mask_of(g, [1, 2])], "accuracy")
        assert val == pytest.approx(0.19)

    def test_removing_star_hurts_detection(self, star_pipeline):
        tp = star_pipeline
        pipeline = EdgePipeline(
            encoder=tp.model.encoder,
            gbdt=tp.gbdt,
            sample_seed=tp.seed,
            sample_epoch=tp.encode_epoch,
        )
        spokes = np.array(
            sorted(tp.edge_of_flow(f) for f in tp.ground_truth["bot_0"])
        )
        drop = fidelity_plus(
            pipeline, [tp.graph], [mask_of(tp.graph, spokes)], "detection_rate"
        )
        assert drop > 0.5

    def test_dr_undefined_without_attacks(self):
        g = graph_with(4)
        pipeline = EdgePipeline(encoder=None, gbdt=None, sample_seed=0, sample_epoch=0)
        with pytest.raises(DataError, match="detection_rate"):
            pipeline.metric(g, "detection_rate")

    def test_unknown_metric(self, star_pipeline):
        tp = star_pipeline
        pipeline = EdgePipeline(
            encoder=tp.model.encoder, gbdt=tp.gbdt, sample_seed=0, sample_epoch=0
        )
        with pytest.raises(DataError):
            pipeline.metric(tp.graph, "auc")


class TestSweep:
    def make_pipeline(self, tp):
        return EdgePipeline(
            encoder=tp.model.encoder,
            gbdt=tp.gbdt,
            sample_seed=tp.seed,
            sample_epoch=tp.encode_epoch,
        )

    def test_row_cardinality(self, star_pipeline):
        tp = star_pipeline
        levels = [0.5, 0.6, 0.7, 0.8, 0.9]
        masks = {
            "a": [make_random_mask(tp.graph, 0, 0.5)],
            "b": [make_random_mask(tp.graph, 1, 0.5)],
        }
        rows = sweep(self.make_pipeline(tp), [tp.graph], masks, levels)
        assert len(rows) == 2 * 5 * 3

    def test_identical_masks_identical_values(self, star_pipeline):
        tp = star_pipeline
        shared = make_random_mask(tp.graph, 7, 0.5)
        masks = {"x": [shared], "y": [shared]}
        rows = sweep(self.make_pipeline(tp), [tp.graph], masks, [0.5, 0.8])
        by = {(r["explainer"], r["sparsity"], r["metric"]): r["value"] for r in rows}
        for level in (0.5, 0.8):
            for metric in ("f1_macro", "accuracy", "detection_rate"):
                assert by[("x", level, metric)] == by[("y", level, metric)]

    def test_deterministic(self, star_pipeline):
        tp = star_pipeline
        masks = {"r": [make_random_mask(tp.graph, 3, 0.5)]}
        a = sweep(self.make_pipeline(tp), [tp.graph], masks, [0.6, 0.9])
        b = sweep(self.make_pipeline(tp), [tp.graph], masks, [0.6, 0.9])
        assert a == b

    def test_levels_must_increase(self, star_pipeline):
        tp = star_pipeline
        masks = {"r": [make_random_mask(tp.graph, 3, 0.5)]}
        with pytest.raises(DataError):
            sweep(self.make_pipeline(tp), [tp.graph], masks, [0.9, 0.5])

    def test_rebinarize_matches_level(self, star_pipeline):
        tp = star_pipeline
        mask = make_random_mask(tp.graph, 0, 0.5)
        for level in (0.5, 0.7, 0.9):
            leveled = rebinarize(mask, level)
            expected = round((1 - level) * tp.graph.n_edges)
            assert len(leveled.important) == expected

    def test_csv_output(self, tmp_path, star_pipeline):
        tp = star_pipeline
        masks = {"r": [make_random_mask(tp.graph, 3, 0.5)]}
        rows = sweep(self.make_pipeline(tp), [tp.graph], masks, [0.5])
        write_sweep_csv(rows, tmp_path / "s.csv")
        lines = (tmp_path / "s.csv").read_text().strip().splitlines()
        assert lines[0] == "explainer,sparsity,metric,value"
        assert len(lines) == 4


class TestCombine:
    def test_elementwise_max(self):
        g = graph_with(4)
        m1 = ExplanationMask(
            target=0,
            edge_indices=np.array([0, 1]),
            weights=np.array([0.9, 0.2]),
            important=np.array([0]),
            sparsity=0.5,
        )
        m2 = ExplanationMask(
            target=1,
            edge_indices=np.array([1, 2]),
            weights=np.array([0.6, 0.3]),
            important=np.array([1]),
            sparsity=0.5,
        )
        combined = combine_masks([m1, m2], g, 0.5)
        assert np.allclose(combined.weights, [0.9, 0.6, 0.3, 0.0])
        assert len(combined.important) == 2

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            combine_masks([], graph_with(3), 0.5)


class TestClassDistribution:
    def test_pooled_counts_and_shares(self):
        labels = ["Benign", "Bot", "Bot", "Benign"]
        g = graph_with(4, labels)
        masks = [mask_of(g, [0, 1]), mask_of(g, [1, 2])]
        dist = class_distribution(masks, g.edge_labels, "Bot")
        # edge 1 (Bot) appears in both explanations and counts twice
        assert dist["counts"] == {"Benign": 1, "Bot": 3}
        assert dist["shares"]["Bot"] == pytest.approx(3 / 4)
        assert sum(dist["shares"].values()) == pytest.approx(1.0, abs=1e-9)

    def test_empty_masks_rejected(self):
        g = graph_with(3)
        with pytest.raises(DataError):
            class_distribution([], g.edge_labels, "Bot")


class TestRandomMask:
    def test_deterministic_and_binarized(self):
        g = graph_with(10)
        a = make_random_mask(g, 5, 0.7)
        b = make_random_mask(g, 5, 0.7)
        assert np.array_equal(a.weights, b.weights)
        assert len(a.important) == 3
