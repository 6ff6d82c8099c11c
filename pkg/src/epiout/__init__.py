"""Uncertainty-aware regression: epistemic output head, baselines, control loop."""
__version__ = "0.1.0"
