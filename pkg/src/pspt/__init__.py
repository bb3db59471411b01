"""Soft-prompt and low-rank passage-adapter tuning for passage reranking."""

__version__ = "0.1.0"
