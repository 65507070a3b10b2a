"""Boundary-aware mixture-of-experts code-switching recognizer on a
numpy tape autodiff engine, with a synthetic two-language corpus."""

__version__ = "0.1.0"
