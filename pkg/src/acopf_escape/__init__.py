"""Escaping strict local minima of AC optimal power flow with partial Lagrangians."""

__version__ = "0.1.0"
