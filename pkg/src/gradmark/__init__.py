"""Gradient-based neural-network watermarking: embedding, extraction, verification and attacks."""

__version__ = "0.1.0"
