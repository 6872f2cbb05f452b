"""Adversarial camouflage toolkit: differentiable texture attacks on small CNNs."""

__version__ = "0.1.0"
