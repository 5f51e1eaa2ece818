"""Synthetic skin-condition images from structured prompts, plus the classifier pipeline that uses them."""

__version__ = "0.1.0"
