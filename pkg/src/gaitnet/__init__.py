"""Bidirectional gait/anatomy prediction on a synthetic gait oracle."""

__version__ = "0.1.0"
