"""Desk-scale audio captioning pipeline with CLAP-based candidate reranking."""

__version__ = "0.1.0"
