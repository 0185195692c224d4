"""Unit commitment solved by three-block ADMM with QUBO-based binary updates."""

__version__ = "0.1.0"
