"""Exponential-penalty simulation, optimal control and optimality checks for controlled sweeping processes."""

__version__ = "0.1.0"
