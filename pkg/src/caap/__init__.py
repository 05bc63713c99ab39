"""Class-adaptive automatic data augmentation for time-series classification."""

__version__ = "0.1.0"
