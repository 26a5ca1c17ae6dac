"""Logit-regularization defenses, L-infinity attacks and a robustness harness on a small autodiff core."""

__version__ = "0.1.0"
