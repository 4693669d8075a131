"""Scalable permutation-equivariant networks for federated learning over
time-varying client graphs."""

__version__ = "0.1.0"
