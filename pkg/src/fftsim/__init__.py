"""Federated fine-tuning simulator over unreliable heterogeneous networks."""

__version__ = "0.1.0"
