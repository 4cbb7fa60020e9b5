"""Reflection-token RAG engine with adaptive retrieval and adapter-MoE layers."""

__version__ = "0.1.0"
