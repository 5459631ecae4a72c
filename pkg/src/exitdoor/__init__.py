"""Deployment-stage backdoors for multi-exit CNNs and a defense bench to test them."""

__version__ = "0.1.0"
