"""Frequency-aware dual-path network for face super-resolution."""

from .net import FADPNet, ModelConfig, make_variant, VARIANTS

__version__ = "0.1.0"
__all__ = ["FADPNet", "ModelConfig", "make_variant", "VARIANTS"]
