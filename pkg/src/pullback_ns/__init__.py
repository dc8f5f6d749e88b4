"""Spectral-Galerkin Navier-Stokes with boundary lift, plus pullback-dynamics diagnostics."""

__version__ = "0.1.0"
