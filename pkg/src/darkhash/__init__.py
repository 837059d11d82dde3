"""Desk-scale laboratory for data-free backdoor attacks on deep hashing retrieval."""

__version__ = "0.1.0"
