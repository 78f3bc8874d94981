"""Task-vector customisation for personalised score regression."""

__version__ = "0.1.0"
