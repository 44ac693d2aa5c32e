"""Context-aware token attention for multiple-instance learning."""

__version__ = "0.1.0"
