"""Shared toy pipelines; session-scoped because DGI + GBDT fits dominate."""

import numpy as np
import pytest

from flowsage import detect, dgi, egsage, explain, flowdata, netgraph, synthgen


class ToyPipeline:
    def __init__(self, scenario, dgi_config, gbdt_params, surrogate_epochs=600):
        self.dataset, self.ground_truth = synthgen.generate(scenario)
        scaled = flowdata.apply_scaler(flowdata.fit_scaler(self.dataset), self.dataset)
        self.graph = netgraph.build_graph(scaled)
        self.model = dgi.train(self.graph, dgi_config)
        self.encode_epoch = dgi_config.epochs
        self.seed = dgi_config.seed
        z = egsage.encode_nodes(
            self.graph, self.model.encoder, self.seed, self.encode_epoch
        )
        self.embeddings = egsage.edge_embedding_matrix(self.graph, z)
        self.labels = self.graph.binary_labels()
        self.gbdt = detect.fit_gbdt(self.embeddings, self.labels, gbdt_params, seed=0)
        self.gbdt_probs = detect.predict_proba(self.gbdt, self.embeddings)
        self.surrogate = explain.fit_surrogate(
            self.embeddings, self.gbdt_probs, epochs=surrogate_epochs, learning_rate=0.05
        )
        self.ctx = explain.make_context(
            self.graph, self.model.encoder, self.surrogate, self.seed, self.encode_epoch
        )

    def edge_of_flow(self, flow_id):
        return self.graph.flow_index()[flow_id]


@pytest.fixture(scope="session")
def star_pipeline():
    """50 benign flows plus a 5-spoke Bot star; full neighborhoods."""
    scenario = synthgen.ScenarioConfig(
        n_benign=50,
        attacks=[synthgen.AttackSpec("Bot", 5)],
        n_hosts=12,
        seed=2,
        attack_fraction=5 / 55,
    )
    return ToyPipeline(
        scenario,
        dgi.DgiConfig(epochs=150, hidden=32, seed=0, sample_size=100),
        detect.GbdtParams(n_trees=40, max_depth=4),
    )


@pytest.fixture(scope="session")
def structured_pipeline():
    """Attack-rich low-degree graph: small computation subgraphs with
    decisive structure, mild GBDT margins for usable explainer gradients."""
    scenario = synthgen.ScenarioConfig(
        n_benign=36,
        attacks=[synthgen.AttackSpec("Bot", 12), synthgen.AttackSpec("DDoS", 12)],
        n_hosts=34,
        seed=5,
        attack_fraction=24 / 60,
    )
    return ToyPipeline(
        scenario,
        dgi.DgiConfig(epochs=150, hidden=16, seed=0, sample_size=100),
        detect.GbdtParams(n_trees=20, max_depth=3),
    )
