"""Egocentric multi-channel audio-visual active speaker localization."""

__version__ = "0.1.0"
