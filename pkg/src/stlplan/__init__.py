"""Differentiable STL planning and goal-conditioned control in a 2D world."""

__version__ = "0.1.0"
