"""Figures from dual-attention trace JSON files."""

__version__ = "0.1.0"

from .render import TraceValidationError, render, validate_trace

__all__ = ["render", "validate_trace", "TraceValidationError", "__version__"]
