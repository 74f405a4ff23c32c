"""Surrogate-based risk estimation for transferred black-box evasion attacks."""

__version__ = "0.1.0"
