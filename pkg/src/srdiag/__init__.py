"""Super-resolution pre-processing for multi-label leaf disease diagnosis."""

__version__ = "0.1.0"
