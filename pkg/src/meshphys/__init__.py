"""Facial spatiotemporal graphs and the MeshPhys pulse estimator."""
from __future__ import annotations

__version__ = "0.1.0"
