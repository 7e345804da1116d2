"""Locator lookup (LLP) overlay trees for low-latency mobility."""

__version__ = "0.1.0"
