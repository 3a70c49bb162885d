"""Discrepancy-aware aggregation for federated learning, simulated end to end."""

__version__ = "0.1.0"
