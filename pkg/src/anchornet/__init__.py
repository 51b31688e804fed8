"""Padding-free patch-proposal CNN with CAM-guided selection and early exit."""

__version__ = "0.1.0"
