"""Relaxed quantization for training fixed-point neural networks."""

__version__ = "0.1.0"
