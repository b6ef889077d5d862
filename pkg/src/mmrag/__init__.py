"""Multimodal retrieval-augmented VQA pipeline: fused-embedding retrieval,
two-stage reranking, inspector-routed answering, and query-rewrite RL tools."""

__version__ = "0.1.0"
