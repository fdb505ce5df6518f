"""Complementary joint training for semi-supervised sequence-to-sequence recognition."""

__version__ = "0.1.0"
