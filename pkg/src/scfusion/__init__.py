"""Semantic consistency cross-attention fusion with self-supervised pre-fine-tuning."""

__version__ = "0.1.0"
