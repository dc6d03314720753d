"""Passing-point and incident-angle tracking of a catheter tip in 2D intracardiac echo sequences."""

__version__ = "0.1.0"
