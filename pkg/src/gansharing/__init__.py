"""Sharing trained generative models between simulated clinical centres instead of patient data."""

__version__ = "0.1.0"
