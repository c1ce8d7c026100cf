"""Visual speech units bridged into a small decoder-only language model."""

__version__ = "0.1.0"
