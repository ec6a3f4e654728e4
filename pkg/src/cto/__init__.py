"""Dual-stream CNN/transformer segmentation with boundary supervision, on numpy."""

from .model import CTO, ModelConfig, build

__all__ = ["CTO", "ModelConfig", "build"]
__version__ = "0.1.0"
