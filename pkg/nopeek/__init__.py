"""Anomaly detection with inpainting autoencoders: residual features, set scores and evaluation."""

__version__ = "0.1.0"
