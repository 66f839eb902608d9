"""Desk-scale backdoor laboratory for prompt-tuned open-vocabulary detectors."""

__version__ = "0.1.0"
