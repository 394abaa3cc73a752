"""Desk-scale simulator of language-guided multi-task federated learning."""

__version__ = "0.1.0"
