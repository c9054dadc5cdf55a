"""Desk-scale emulator of a UAV-hosted control and edge service stack."""

__version__ = "0.1.0"
