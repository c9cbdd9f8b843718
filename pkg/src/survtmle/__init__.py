"""Targeted maximum likelihood estimation of risks for right-censored data."""

__version__ = "0.1.0"
