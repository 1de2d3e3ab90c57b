"""Stable linear state-space identification by multi-step gradient descent."""
__version__ = "0.1.0"
