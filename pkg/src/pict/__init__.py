"""Weakly supervised pavement distress classification with a patch-labeling teacher and patch refiner."""

__version__ = "0.1.0"
