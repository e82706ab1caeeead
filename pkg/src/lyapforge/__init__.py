"""Stability certificates and smooth Lyapunov pairs for fluid networks."""

__version__ = "0.1.0"
