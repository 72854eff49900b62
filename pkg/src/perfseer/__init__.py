"""Performance prediction for deep-learning computational graphs."""

__version__ = "0.1.0"
