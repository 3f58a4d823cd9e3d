"""Clinically-guided prototype learning and explainable likelihood maps."""

__version__ = "0.1.0"
