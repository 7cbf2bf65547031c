"""Surgical action-triplet recognition: data model, synthetic frames, Tripnet, metrics."""

__version__ = "0.1.0"
