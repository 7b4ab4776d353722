"""Deterministic simulator and library for federated online model selection."""

__version__ = "0.1.0"
