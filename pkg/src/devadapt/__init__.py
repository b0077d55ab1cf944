"""Adversarial device adaptation of log-Mel features for acoustic scene classification."""

__version__ = "0.1.0"
