"""Asynchronous biomedical entity annotation server."""

__version__ = "0.1.0"
