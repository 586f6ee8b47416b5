"""Conditional (CLNN) and masked conditional (MCLNN) neural networks for
spectrogram segment classification, written on numpy."""

from .masking import BinaryMask, MaskSpec, generate_mask, mask_stats, mask_weights
from .network import Model, ModelConfig, build_model, load_model, model_forward, save_model, segment_width

__version__ = "0.1.0"

__all__ = [
    "BinaryMask", "MaskSpec", "generate_mask", "mask_stats", "mask_weights",
    "Model", "ModelConfig", "build_model", "load_model", "model_forward", "save_model", "segment_width",
]
