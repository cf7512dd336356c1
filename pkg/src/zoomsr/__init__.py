"""Self-supervised reference-based super-resolution from dual and triple zoom captures."""

__version__ = "0.1.0"
