"""Explanation-guided active learning on synthetic annotated images."""

__version__ = "0.1.0"
