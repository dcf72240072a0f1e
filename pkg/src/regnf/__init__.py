"""Sim(3) registration of signed distance fields."""

__version__ = "0.1.0"
