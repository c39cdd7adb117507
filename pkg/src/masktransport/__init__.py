"""Exemplar-based image manipulation driven by semantic-free masks."""

__version__ = "0.1.0"
