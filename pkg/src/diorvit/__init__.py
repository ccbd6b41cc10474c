"""Differential ordinal learning with a from-scratch ViT on numpy."""

__version__ = "0.1.0"
