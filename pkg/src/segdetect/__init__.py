"""Adversarial attacks on a toy segmentation model and their uncertainty-based detection."""

__version__ = "0.1.0"
