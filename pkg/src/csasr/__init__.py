"""Framework-free toolkit for code-switching end-to-end speech recognition."""

__version__ = "0.1.0"
