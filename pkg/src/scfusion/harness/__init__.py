"""Desk-scale two-step training pipeline, ablations and checkpoints."""
