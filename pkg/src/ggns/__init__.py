"""Grounding graph network simulator: learned mesh dynamics corrected by point clouds."""

__version__ = "0.1.0"
