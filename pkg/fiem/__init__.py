"""Incremental EM engines, step-size planners and a Monte Carlo harness."""

__version__ = "0.1.0"
