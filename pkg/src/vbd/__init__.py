"""Variance-based backdoor defense: poisoning, detection and sanitization of image training sets."""

__version__ = "0.1.0"
