"""Observed-position hidden Markov model for place-cell spike trains."""

__version__ = "0.1.0"
