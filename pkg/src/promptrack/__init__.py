"""Prompt-conditioned multi-object tracking toolkit."""

__version__ = "0.1.0"
