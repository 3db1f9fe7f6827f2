"""Matching-based estimation of survivor average causal effects."""

__version__ = "0.1.0"
