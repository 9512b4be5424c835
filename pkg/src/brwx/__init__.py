"""Simulation and exact oracles for branching random walks in the boundary case."""
from __future__ import annotations

__version__ = "0.1.0"
