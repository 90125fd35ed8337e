"""Micro-expression recognition pipeline built around onset/apex optical flow."""

__version__ = "0.1.0"
