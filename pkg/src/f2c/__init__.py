"""Fine-to-coarse staged training for low-resolution recognition, on a numpy CNN."""

__version__ = "0.1.0"
