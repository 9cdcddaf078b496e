"""Dynamic OD-sequence estimation laboratory."""

__version__ = "0.1.0"
