"""Desk-scale denoised randomized smoothing with confidence-aware fine-tuning."""

__version__ = "0.1.0"
