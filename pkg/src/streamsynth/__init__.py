"""Desk-scale streaming speech-token synthesis engine on synthetic data."""

__version__ = "0.1.0"
