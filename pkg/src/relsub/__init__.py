"""Relevant subspace analysis (PRCA / DRSA) for disentangled explanations."""

__version__ = "0.1.0"
