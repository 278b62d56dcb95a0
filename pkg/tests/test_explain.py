import numpy as np
import pytest

from flowsage import explain
from flowsage.egsage import edge_embedding_matrix, encode_nodes, init_encoder
from flowsage.errors import DataError, NumericError
from flowsage.explain import (
    ExplainerConfig,
    GnnExplainerConfig,
    apply_mask,
    binarize_mask,
    computation_subgraph,
    explain_edge,
    explain_gnnexplainer,
    fit_surrogate,
    full_weights,
    make_context,
    surrogate_loss_and_grads,
    train_pgexplainer,
)
from flowsage.flowdata import FlowDataset, FlowRecord
from flowsage.netgraph import build_graph
from flowsage.numcore import grad_check, sigmoid


def small_graph(pairs, feats):
    records = [
        FlowRecord(i, s, t, np.asarray(f, dtype=np.float64), "Benign")
        for i, ((s, t), f) in enumerate(zip(pairs, feats))
    ]
    return build_graph(
        FlowDataset(records=records, feature_names=[f"f{j}" for j in range(len(feats[0]))])
    )


class TestSurrogate:
    def test_constant_half_targets_zero_params(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(50, 4))
        head = fit_surrogate(z, np.full(50, 0.5), epochs=100)
        assert np.abs(head.weights).max() < 1e-9
        assert abs(head.bias) < 1e-9

    def test_linear_logits_distilled_closely(self):
        rng = np.random.default_rng(1)
        z = rng.normal(size=(400, 6))
        w_true = rng.normal(size=6)
        probs = sigmoid(z @ w_true - 0.3)
        head = fit_surrogate(z, probs, epochs=800, learning_rate=0.1)
        assert np.abs(head.predict_proba(z) - probs).mean() < 0.02

    def test_gate_enforced(self):
        rng = np.random.default_rng(2)
        z = rng.normal(size=(100, 2))
        # xor-ish targets cannot be matched by a linear head
        t = ((z[:, 0] > 0) ^ (z[:, 1] > 0)).astype(float) * 0.98 + 0.01
        with pytest.raises(NumericError, match="gate"):
            fit_surrogate(z, t, epochs=50, gate=0.05)

    def test_gate_records_quality(self):
        rng = np.random.default_rng(3)
        z = rng.normal(size=(60, 3))
        head = fit_surrogate(z, sigmoid(z @ np.ones(3)), epochs=500)
        assert head.mean_abs_dev <= 0.1

    def test_too_few_samples(self):
        with pytest.raises(DataError):
            fit_surrogate(np.zeros((5, 2)), np.full(5, 0.5))

    @pytest.mark.parametrize("seed", range(5))
    def test_gradients_exact(self, seed):
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(20, 4))
        t = rng.uniform(0.05, 0.95, size=20)
        w = rng.normal(size=4)
        b = float(rng.normal())
        _, dw, db = surrogate_loss_and_grads(w, b, z, t)
        err = grad_check(
            lambda p: surrogate_loss_and_grads(p["w"], float(p["b"][0]), z, t)[0],
            {"w": w, "b": np.array([b])},
            {"w": dw, "b": np.array([db])},
        )
        assert err < 1e-3


class TestApplyMask:
    def setup_method(self):
        self.graph = small_graph(
            [("A", "B"), ("B", "C"), ("C", "A"), ("A", "B")],
            [[1.0, 2.0], [3.0, 1.0], [0.5, 0.5], [2.0, 2.0]],
        )
        self.encoder = init_encoder(2, hidden=3, seed=0, sample_size=100)

    def test_all_ones_identity_both_modes(self):
        base = edge_embedding_matrix(
            self.graph, encode_nodes(self.graph, self.encoder, 0, 0)
        )
        for mode in ("soft", "hard"):
            out = apply_mask(self.graph, self.encoder, np.ones(4), 0, 0, mode)
            assert np.array_equal(out, base)

    def test_all_zeros_zero_aggregates(self):
        # with zero aggregate the node embedding reduces to relu(W M x_v)
        out = apply_mask(self.graph, self.encoder, np.zeros(4), 0, 0, "soft")
        d = 2
        w_self = self.encoder.weights[0][:, :d] @ np.ones(d)
        expected_node = np.maximum(w_self, 0.0)
        assert np.allclose(out[0], np.concatenate([expected_node, expected_node]))

    def test_parallel_edge_halving(self):
        # edges 0 and 3 both join A->B; zeroing edge 3 halves the pair's
        # contribution to exactly the surviving message
        g = small_graph([("A", "B"), ("A", "B")], [[4.0], [2.0]])
        enc = init_encoder(1, hidden=2, seed=1, sample_size=10)
        w = np.array([1.0, 0.0])
        z = encode_nodes(g, enc, 0, 0, edge_weights=w)
        # aggregate at A: mean over 2 sampled = ([1,4] * 1 + 0) / 2
        agg = np.array([1.0, 4.0]) / 2
        pre = enc.weights[0] @ np.concatenate([[1.0], agg])
        assert np.allclose(z[0], np.maximum(pre, 0))

    def test_hard_mode_removes_from_topology(self):
        w = np.array([1.0, 0.0, 1.0, 1.0])
        out_hard = apply_mask(self.graph, self.encoder, w, 0, 0, "hard")
        out_soft = apply_mask(self.graph, self.encoder, w, 0, 0, "soft")
        assert out_hard.shape == out_soft.shape == (4, 6)
        # hard mode renormalizes the mean over survivors, so they differ
        assert not np.allclose(out_hard, out_soft)

    def test_bad_weights_shape(self):
        with pytest.raises(DataError):
            apply_mask(self.graph, self.encoder, np.ones(3), 0, 0)


class TestBinarize:
    def test_cardinality_rule(self):
        idx = np.arange(10)
        w = np.linspace(0.1, 0.9, 10)
        assert len(binarize_mask(idx, w, 0.9)) == 1
        assert len(binarize_mask(idx, w, 0.0)) == 10
        assert len(binarize_mask(idx, w, 0.5)) == 5

    def test_keeps_highest_weights(self):
        idx = np.array([5, 7, 9])
        w = np.array([0.1, 0.9, 0.5])
        assert list(binarize_mask(idx, w, 2 / 3)) == [7]

    def test_empty_selection_keeps_one(self):
        with pytest.warns(UserWarning):
            kept = binarize_mask(np.array([3, 4]), np.array([0.2, 0.8]), 0.99)
        assert list(kept) == [4]

    def test_tie_breaks_lower_index(self):
        idx = np.array([2, 8, 5])
        w = np.array([0.5, 0.5, 0.5])
        assert list(binarize_mask(idx, w, 2 / 3)) == [2]

    def test_bad_sparsity(self):
        with pytest.raises(DataError):
            binarize_mask(np.array([0]), np.array([0.5]), 1.0)


class TestComputationSubgraph:
    def test_one_hop_incident_edges(self):
        g = small_graph(
            [("A", "B"), ("B", "C"), ("C", "D")], [[1.0], [1.0], [1.0]]
        )
        sub = computation_subgraph(g, 0)  # A-B: edges at A or B
        assert list(sub) == [0, 1]

    def test_self_loop_target(self):
        g = small_graph([("A", "A"), ("A", "B")], [[1.0], [1.0]])
        assert list(computation_subgraph(g, 0)) == [0, 1]

    def test_two_hops_extend(self):
        g = small_graph(
            [("A", "B"), ("B", "C"), ("C", "D")], [[1.0], [1.0], [1.0]]
        )
        assert list(computation_subgraph(g, 0, hops=2)) == [0, 1, 2]


class TestPgExplainer:
    def test_planted_star_recovery(self, star_pipeline):
        tp = star_pipeline
        net = train_pgexplainer(
            tp.ctx, ExplainerConfig(epochs=30, train_targets=30, seed=0)
        )
        spokes = {tp.edge_of_flow(f) for f in tp.ground_truth["bot_0"]}
        target = sorted(spokes)[0]
        sub = computation_subgraph(tp.graph, target)
        sparsity = 1 - 5 / len(sub)
        mask = explain_edge(net, tp.ctx, target, sparsity)
        recovered = len(set(mask.important.tolist()) & spokes)
        assert recovered >= 4

    def test_huge_size_penalty_kills_mask(self, star_pipeline):
        tp = star_pipeline
        config = ExplainerConfig(
            epochs=20, train_targets=20, seed=0, size_coeff=50.0, entropy_coeff=0.0
        )
        net = train_pgexplainer(tp.ctx, config)
        mask = explain_edge(net, tp.ctx, 0, 0.5)
        assert mask.weights.max() < 0.1

    def test_deterministic_training(self, star_pipeline):
        tp = star_pipeline
        config = ExplainerConfig(epochs=5, train_targets=10, seed=3)
        a = train_pgexplainer(tp.ctx, config)
        b = train_pgexplainer(tp.ctx, config)
        assert np.array_equal(a.w_hidden, b.w_hidden)
        assert np.array_equal(a.w_out, b.w_out)
        assert a.loss_history == b.loss_history

    def test_explaining_mutates_no_state(self, star_pipeline):
        tp = star_pipeline
        net = train_pgexplainer(tp.ctx, ExplainerConfig(epochs=5, train_targets=10, seed=0))
        snap = {k: v.copy() for k, v in net.params().items()}
        m1 = explain_edge(net, tp.ctx, 0, 0.5)
        m2 = explain_edge(net, tp.ctx, 1, 0.5)
        m1_again = explain_edge(net, tp.ctx, 0, 0.5)
        assert all(np.array_equal(net.params()[k], snap[k]) for k in snap)
        assert np.array_equal(m1.weights, m1_again.weights)
        assert m2.target != m1.target

    def test_mask_weights_in_unit_interval(self, star_pipeline):
        tp = star_pipeline
        net = train_pgexplainer(tp.ctx, ExplainerConfig(epochs=10, train_targets=15, seed=0))
        mask = explain_edge(net, tp.ctx, 3, 0.7)
        assert ((mask.weights > 0) & (mask.weights < 1)).all()
        assert len(mask.important) == round((1 - 0.7) * len(mask.edge_indices))


class TestGnnExplainer:
    def test_zero_steps_uniform_weights(self, star_pipeline):
        tp = star_pipeline
        mask = explain_gnnexplainer(
            tp.ctx, 0, 0.5, GnnExplainerConfig(steps=0)
        )
        assert np.allclose(mask.weights, 0.5)

    def test_deterministic(self, star_pipeline):
        tp = star_pipeline
        a = explain_gnnexplainer(tp.ctx, 2, 0.5)
        b = explain_gnnexplainer(tp.ctx, 2, 0.5)
        assert np.array_equal(a.weights, b.weights)
        assert np.array_equal(a.important, b.important)

    def test_planted_star_recovery(self, star_pipeline):
        tp = star_pipeline
        spokes = {tp.edge_of_flow(f) for f in tp.ground_truth["bot_0"]}
        target = sorted(spokes)[0]
        sub = computation_subgraph(tp.graph, target)
        mask = explain_gnnexplainer(tp.ctx, target, 1 - 5 / len(sub))
        assert len(set(mask.important.tolist()) & spokes) >= 4

    def test_isolated_target_rejected(self, star_pipeline):
        tp = star_pipeline
        with pytest.raises(DataError):
            explain_gnnexplainer(tp.ctx, 10_000, 0.5)


class TestExplainerNetGradients:
    @pytest.mark.parametrize("seed", range(5))
    def test_objective_gradient_exact(self, seed, structured_pipeline):
        tp = structured_pipeline
        ctx = tp.ctx
        config = ExplainerConfig(hidden=3, seed=seed)
        net = explain.init_explainer_net(2 * ctx.hidden, config)
        target = int(seed % tp.graph.n_edges)
        cand = explain._training_candidates(ctx, target)
        inputs = np.hstack(
            [ctx.edge_q[cand], np.tile(ctx.edge_q[target], (cand.size, 1))]
        )
        p_orig = float(tp.surrogate.predict_proba(ctx.edge_q[target])[0])
        rng = np.random.default_rng(seed)
        u = rng.uniform(1e-6, 1 - 1e-6, size=cand.size)
        noise = np.log(u) - np.log1p(-u)
        tau = 2.0

        def objective(params):
            hid = np.maximum(inputs @ params["w_hidden"].T + params["b_hidden"], 0.0)
            omega = hid @ params["w_out"] + params["b_out"][0]
            mask = sigmoid((omega + noise) / tau)
            prob, _ = explain._masked_prediction(ctx, target, cand, mask)
            loss, _, _ = explain._objective_terms(prob, p_orig, mask, 0.01, 0.1)
            return loss

        omega = net.logits(inputs)
        mask = sigmoid((omega + noise) / tau)
        prob, d_prob_d_mask = explain._masked_prediction(ctx, target, cand, mask)
        _, d_ce_d_prob, d_reg = explain._objective_terms(prob, p_orig, mask, 0.01, 0.1)
        d_mask = d_ce_d_prob * d_prob_d_mask + d_reg
        d_omega = d_mask * mask * (1.0 - mask) / tau
        grads = explain.explainer_forward_backward(net, inputs, d_omega)
        assert grad_check(objective, net.params(), grads) < 1e-3


class TestMaskDocument:
    def test_document_lists_ranked_edges(self, star_pipeline):
        tp = star_pipeline
        mask = explain_gnnexplainer(tp.ctx, 0, 0.5, GnnExplainerConfig(steps=5))
        doc = mask.to_document(tp.graph)
        assert doc["sparsity"] == 0.5
        ranks = [e["rank"] for e in doc["edges"]]
        assert ranks == sorted(ranks)
        weights = [e["weight"] for e in doc["edges"]]
        assert weights == sorted(weights, reverse=True)
        assert any(e["important"] for e in doc["edges"])
