"""Desk-scale laboratory for retrieval-augmented classification with explanations."""

__version__ = "0.1.0"
