"""Tiny U-Net segmentation with trainable monogenic local-phase gating."""
from .network import ModelSpec, MonoUNet, build, count_flops, param_formula
from .monogenic import MonoBlock

__all__ = ["ModelSpec", "MonoUNet", "MonoBlock", "build", "count_flops", "param_formula"]
