"""Set-based cross-modal embedding similarity toolkit."""

__version__ = "0.1.0"
