"""Footprint-aware time-to-collision, conflict datasets and mixed logit severity models."""

__version__ = "0.1.0"
