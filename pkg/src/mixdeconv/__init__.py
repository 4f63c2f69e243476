"""Bayes factors for sequenced STR DNA mixtures."""

__version__ = "0.1.0"
