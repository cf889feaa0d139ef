"""Disentangled multi-modal recommendation with missing-modality generation."""

__version__ = "0.1.0"
