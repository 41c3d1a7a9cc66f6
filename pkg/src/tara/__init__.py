"""Conformal and martingale detectors separating quantum CHSH data from classical simulations."""

__version__ = "0.1.0"
