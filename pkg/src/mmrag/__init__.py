"""Multimodal embedding fusion, cosine retrieval and LLM re-ranking for recommendation."""

__version__ = "0.1.0"
