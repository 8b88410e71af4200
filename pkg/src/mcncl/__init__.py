"""Multimodal cross-attention fusion with supervised contrastive learning for emotion recognition."""
from mcncl._accel import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
