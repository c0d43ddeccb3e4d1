"""Probable-class nearest-neighbor re-ranking with a trainable pair comparator."""

__version__ = "0.1.0"
