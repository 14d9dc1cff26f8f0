"""Simulation-based inference of terrain parameters from radar sounder peak powers."""

__version__ = "0.1.0"
