"""Desk-scale spoken language understanding with confidence-aware fusion."""

__version__ = "0.1.0"
