"""Hybridization-based reachability and extremal computation for nonlinear control systems."""

__version__ = "0.1.0"
