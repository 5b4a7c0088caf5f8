"""Federated dual-encoder training by aggregating encoding statistics."""

__version__ = "0.1.0"
