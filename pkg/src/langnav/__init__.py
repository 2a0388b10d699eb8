"""Desk-scale workbench for instruction-guided continuous-control navigation."""

__version__ = "0.1.0"
