"""Sanitizing poisoned training sets with per-class mixtures and complete-data BIC."""

__version__ = "0.1.0"
