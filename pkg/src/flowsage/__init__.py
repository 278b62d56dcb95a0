"""flowsage: flow-graph intrusion detection with explainable edge embeddings."""

__version__ = "0.1.0"
