"""Dual-classifier semi-supervised segmentation with evidential uncertainty."""

from .errors import EvicoError

__version__ = "0.1.0"

__all__ = ["EvicoError", "__version__"]
