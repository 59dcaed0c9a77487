"""The full enhancement network and its training loss.

Pipeline for a noisy waveform::

    stft -> |.| -> ODConv stack -> per-frame projection  --+
                                                            +--> concat -> linear -> N blocks
    waveform -> frozen SSL encoder -> layer mix -> align  --+
        -> LayerNorm -> linear(D -> F) -> sigmoid mask -> mask noisy STFT -> istft
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import dsp
from .dda import BLOCK_KINDS, make_block, sinusoidal_positions
from .errors import ConfigError, DimensionError, InvalidInputError
from .odconv import ODConv2d
from .ssl_bridge import Fusion, SslBranch, SslEncoderSpec, align

SPEC_COMPRESSIONS = ("log1p", "none")


@dataclass(frozen=True)
class OdconvConfig:
    enabled: bool = True
    layers: int = 2
    channels: int = 8
    n_kernels: int = 4
    kernel_size: int = 3
    reduction: int = 4

    def __post_init__(self):
        if self.layers < 1 or self.channels < 1 or self.n_kernels < 1:
            raise ConfigError("odconv.layers, odconv.channels and odconv.n_kernels must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("odconv.kernel_size must be a positive odd integer")
        if self.reduction < 1:
            raise ConfigError("odconv.reduction must be >= 1")


@dataclass(frozen=True)
class ModelConfig:
    stft: dsp.StftConfig = field(default_factory=dsp.StftConfig)
    odconv: OdconvConfig = field(default_factory=OdconvConfig)
    ssl: SslEncoderSpec = field(default_factory=SslEncoderSpec)
    use_spectral: bool = True
    use_ssl: bool = True
    dim: int = 256
    heads: int = 4
    ff_mult: int = 4
    n_blocks: int = 2
    block: str = "dda"
    conv_kernel: int = 31
    spec_dim: int = 256
    spec_compress: str = "log1p"
    mask_activation: str = "sigmoid"
    loss_beta: float = 1.0
    waveform_loss_weight: float = 0.0
    dropout: float = 0.1

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ConfigError("model.n_blocks must be >= 1")
        if self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"model.dim {self.dim} must be divisible by model.heads {self.heads}")
        if self.block not in BLOCK_KINDS:
            raise ConfigError(f"model.block must be one of {BLOCK_KINDS}, got {self.block!r}")
        if not (self.use_spectral or self.use_ssl):
            raise ConfigError("at least one of model.use_spectral / model.use_ssl must be on")
        if self.spec_compress not in SPEC_COMPRESSIONS:
            raise ConfigError(f"model.spec_compress must be one of {SPEC_COMPRESSIONS}")
        if self.mask_activation != "sigmoid":
            raise ConfigError("model.mask_activation supports only 'sigmoid'")
        if self.loss_beta <= 0:
            raise ConfigError("loss.beta must be > 0")
        if not 0 <= self.dropout < 1:
            raise ConfigError("model.dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        nested = {"stft": dsp.StftConfig, "odconv": OdconvConfig, "ssl": SslEncoderSpec}
        for key, typ in nested.items():
            if key in d and isinstance(d[key], dict):
                d[key] = typ(**d[key])
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form; identifies checkpoint compatibility."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


@dataclass
class EnhancementOutput:
    mask: Tensor
    enhanced_spectrogram: dsp.ComplexSpectrogram
    enhanced_waveform: Tensor
    noisy_spectrogram: dsp.ComplexSpectrogram

    @property
    def enhanced_magnitude(self) -> Tensor:
        return dsp.magnitude(self.enhanced_spectrogram)


class SpectralBranch(nn.Module):
    """Conv stack on the (1 x T x F) magnitude map, flattened and projected per frame."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        oc, n_bins = cfg.odconv, cfg.stft.n_bins
        self.compress = cfg.spec_compress
        layers = []
        c_in = 1
        for _ in range(oc.layers):
            if oc.enabled:
                layers.append(ODConv2d(c_in, oc.channels, oc.kernel_size, oc.n_kernels, oc.reduction))
            else:
                layers.append(nn.Conv2d(c_in, oc.channels, oc.kernel_size,
                                        padding=oc.kernel_size // 2, bias=False))
            c_in = oc.channels
        self.layers = nn.ModuleList(layers)
        self.proj = nn.Linear(oc.channels * n_bins, cfg.spec_dim)

    def forward(self, mag: Tensor) -> Tensor:
        x = torch.log1p(mag) if self.compress == "log1p" else mag
        x = x.unsqueeze(1)
        for i, layer in enumerate(self.layers):
            if i:
                x = F.relu(x)
            x = layer(x)
        b, c, t, f = x.shape
        return self.proj(x.permute(0, 2, 1, 3).reshape(b, t, c * f))


class HFSDA(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        in_dims = []
        self.spectral = SpectralBranch(cfg) if cfg.use_spectral else None
        if self.spectral is not None:
            in_dims.append(cfg.spec_dim)
        self.ssl = SslBranch(cfg.ssl, cfg.stft.sample_rate_hz) if cfg.use_ssl else None
        if self.ssl is not None:
            in_dims.append(cfg.ssl.output_dim)
        self.fusion = Fusion(in_dims, cfg.dim)
        self.blocks = nn.ModuleList(
            make_block(cfg.block, cfg.dim, cfg.heads, cfg.ff_mult, cfg.conv_kernel, cfg.dropout)
            for _ in range(cfg.n_blocks))
        self.head_norm = nn.LayerNorm(cfg.dim)
        self.head = nn.Linear(cfg.dim, cfg.stft.n_bins)

    @property
    def dtype(self):
        return self.head.weight.dtype

    def features(self, waveform: Tensor, spec: dsp.ComplexSpectrogram) -> Tensor:
        """Fused, position-encoded ``(B, T, D)`` features for the blocks."""
        t = spec.data.shape[-2]
        streams = []
        if self.spectral is not None:
            streams.append(self.spectral(dsp.magnitude(spec)))
        if self.ssl is not None:
            streams.append(align(self.ssl(waveform), t))
        h = self.fusion(*streams)
        return h + sinusoidal_positions(t, self.cfg.dim, h.dtype).to(h.device)

    def mask_logits(self, waveform: Tensor, spec: dsp.ComplexSpectrogram) -> Tensor:
        h = self.features(waveform, spec)
        for block in self.blocks:
            h = block(h)
        return self.head(self.head_norm(h))

    def forward(self, noisy) -> EnhancementOutput:
        """Enhance ``(L,)`` or ``(B, L)`` noisy audio; length must be >= win_length."""
        x = noisy if isinstance(noisy, Tensor) else torch.as_tensor(np.asarray(noisy))
        x = x.to(self.dtype)
        squeeze = x.dim() == 1
        if squeeze:
            x = x.unsqueeze(0)
        if x.shape[-1] < self.cfg.stft.win_length:
            raise InvalidInputError(
                f"input of {x.shape[-1]} samples is shorter than one {self.cfg.stft.win_length}-sample frame")
        spec = dsp.stft(x, self.cfg.stft)
        mask = torch.sigmoid(self.mask_logits(x, spec))
        enhanced = dsp.apply_mask(spec, mask)
        wav = dsp.istft(enhanced)
        out = EnhancementOutput(mask, enhanced, wav, spec)
        if squeeze:
            out = _unbatch(out)
        return out


def _unbatch(out: EnhancementOutput) -> EnhancementOutput:
    def first(s):
        nyq = None if s.nyquist is None else s.nyquist[0]
        return replace(s, data=s.data[0], nyquist=nyq)
    return EnhancementOutput(out.mask[0], first(out.enhanced_spectrogram),
                             out.enhanced_waveform[0], first(out.noisy_spectrogram))


def spectral_loss(enhanced_mag: Tensor, clean_mag: Tensor, beta: float = 1.0) -> Tensor:
    """Mean smooth-L1 between magnitude spectrograms (quadratic below ``beta``)."""
    if enhanced_mag.shape != clean_mag.shape:
        raise DimensionError(
            f"shape mismatch: {tuple(enhanced_mag.shape)} vs {tuple(clean_mag.shape)}")
    if beta <= 0:
        raise InvalidInputError("beta must be > 0")
    return F.smooth_l1_loss(enhanced_mag, clean_mag, beta=beta)


def training_loss(model: HFSDA, noisy: Tensor, clean: Tensor) -> Tensor:
    cfg = model.cfg
    out = model(noisy)
    clean = clean.to(model.dtype)
    clean_mag = dsp.magnitude(dsp.stft(clean, cfg.stft))
    loss = spectral_loss(out.enhanced_magnitude, clean_mag, cfg.loss_beta)
    if cfg.waveform_loss_weight:
        loss = loss + cfg.waveform_loss_weight * F.smooth_l1_loss(
            out.enhanced_waveform, clean, beta=cfg.loss_beta)
    return loss


@torch.no_grad()
def enhance_file(model: HFSDA, waveform) -> np.ndarray:
    """Whole-utterance inference; output has the input's length."""
    was_training = model.training
    model.eval()
    try:
        out = model(np.asarray(waveform))
    finally:
        model.train(was_training)
    return out.enhanced_waveform.double().numpy()


def describe_architecture(model: nn.Module) -> list[str]:
    """One line per leaf-ish module: dotted name, class and own parameter count."""
    lines = []
    for name, mod in model.named_modules():
        own = sum(p.numel() for p in mod.parameters(recurse=False))
        if own:
            lines.append(f"{name} {type(mod).__name__} params={own}")
    return lines


def trainable_parameters(model: nn.Module):
    return [(n, p) for n, p in model.named_parameters() if p.requires_grad]
