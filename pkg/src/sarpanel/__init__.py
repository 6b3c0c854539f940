"""Saddlepoint and Edgeworth approximations for spatial panel MLEs."""

__version__ = "0.1.0"
