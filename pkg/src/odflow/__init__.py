"""Metro OD flow completion and prediction."""

__version__ = "0.1.0"
