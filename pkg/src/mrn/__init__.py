"""Multimodal residual fusion networks on a synthetic grid-world VQA task."""

__version__ = "0.1.0"
