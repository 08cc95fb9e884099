"""Cross-modal optical flow with a modality-pair encoder bank."""

__version__ = "0.1.0"
