"""Sobolev-trained optimization proxies: solver, sensitivities, training and evaluation."""

__version__ = "0.1.0"
