"""Text CNN training with a stacked noise-adaptation layer for noisy labels."""

__version__ = "0.1.0"
