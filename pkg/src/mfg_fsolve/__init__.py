"""Finite-state mean field games: equilibrium solver, J-certificates, value clouds and master-equation checks."""

__version__ = "0.1.0"
