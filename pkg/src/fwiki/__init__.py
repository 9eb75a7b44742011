"""Coherence-gated repository engine for libraries of formal articles."""

__version__ = "0.1.0"
