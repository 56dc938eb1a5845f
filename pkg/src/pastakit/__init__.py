"""Annotated asynchronous decoding: language, interpreter, metrics and data prep."""

__version__ = "0.1.0"
