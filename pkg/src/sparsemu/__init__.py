"""Sparsity-aided machine unlearning on small numpy models."""

__version__ = "0.1.0"
