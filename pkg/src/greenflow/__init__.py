"""Ballistic NEGF/Poisson nanosheet simulator with an autoencoder warm start."""

__version__ = "0.1.0"
