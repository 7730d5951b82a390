"""Affective image generation ablation framework."""

__version__ = "0.1.0"
