"""Batch learning from bandit feedback with estimated, translated IPS."""

__version__ = "0.1.0"
