"""Simulation and closed-loop control workbench for stochastic PDEs."""

__version__ = "0.1.0"
