# src/__init__.py
"""Discrete operator calculus for rough fractional Brownian motion."""

__version__ = '0.1.0'
