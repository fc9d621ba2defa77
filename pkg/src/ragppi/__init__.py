"""Hybrid human / LLM-judge evaluation of RAG systems."""

__version__ = "0.1.0"
