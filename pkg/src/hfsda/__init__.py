"""Speech enhancement from fused self-supervised and spectrogram features.

Spectral branch: STFT magnitudes through omni-dimensional dynamic
convolution.  Semantic branch: frozen self-supervised encoder embeddings.
The fused sequence passes through dual-dimension attention blocks (temporal
self-attention plus frequency-axis attention) that predict a magnitude mask.
"""
from .dsp import ComplexSpectrogram, StftConfig, apply_mask, istft, magnitude, stft
from .model import HFSDA, ModelConfig, enhance_file, spectral_loss
from .trainer import TrainConfig, build_ablation, lr_at, train

__version__ = "0.1.0"

__all__ = [
    "ComplexSpectrogram", "StftConfig", "apply_mask", "istft", "magnitude", "stft",
    "HFSDA", "ModelConfig", "enhance_file", "spectral_loss",
    "TrainConfig", "build_ablation", "lr_at", "train",
]
