"""Asymptotic expansions of blow-up solutions for quasi-homogeneous ODE systems."""

__version__ = "0.1.0"
