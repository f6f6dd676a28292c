"""Adversarial attacks, defences, attribution maps and distillation for small CNN leaf classifiers."""

__version__ = "0.1.0"
