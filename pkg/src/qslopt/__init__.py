"""Krotov optimal control and quantum-speed-limit estimation for the
Landau-Zener model and single-excitation spin-chain transfer."""

__version__ = "0.1.0"
