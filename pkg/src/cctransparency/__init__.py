"""Confidential computing transparency toolkit."""

__version__ = "0.1.0"
