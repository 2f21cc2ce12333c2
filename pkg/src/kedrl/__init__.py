"""Kernel mean embeddings of return distributions for off-policy evaluation."""

__version__ = "0.1.0"
