"""Frenet-frame highway maneuver pipeline and lane-change intention classifier."""

__version__ = "0.1.0"
