"""Hierarchical federated learning simulator and energy-aware configuration selection."""

__version__ = "0.1.0"
