"""Adversarial driving testbed: attacks on an end-to-end steering regressor."""

__version__ = "0.1.0"
