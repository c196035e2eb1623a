"""Explainable multi-agent deep RL for V2X spectrum and power allocation."""

__version__ = "0.1.0"
