"""Incentive-based rebalancing of dockless bike-sharing systems."""

__version__ = "0.1.0"
