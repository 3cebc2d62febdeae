"""Adaptive-margin contrastive learning for time series, with clustering and probe evaluation."""

__version__ = "0.1.0"
