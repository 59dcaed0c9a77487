"""STFT analysis/synthesis and magnitude masking.

Framing defaults are 25 ms Hamming windows with a 10 ms hop at 16 kHz and a
400-point FFT.  The one-sided transform has 201 bins; the Nyquist bin is
split off so the model sees exactly ``fft_size // 2`` bins, but it is kept on
the spectrogram object so that synthesis stays a perfect inverse.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import torch

from .errors import DimensionError, InvalidInputError

WINDOWS = ("hamming",)
BIN_POLICIES = ("drop_nyquist",)


@dataclass(frozen=True)
class StftConfig:
    sample_rate_hz: int = 16000
    win_length: int = 400
    fft_size: int = 400
    hop_length: int = 160
    window: str = "hamming"
    center_pad: bool = True
    bin_policy: str = "drop_nyquist"

    def __post_init__(self):
        if self.win_length > self.fft_size:
            raise InvalidInputError(
                f"win_length {self.win_length} exceeds fft_size {self.fft_size}")
        if not 1 <= self.hop_length <= self.win_length:
            raise InvalidInputError(
                f"hop_length must be in [1, win_length], got {self.hop_length}")
        if self.fft_size % 2:
            raise InvalidInputError("fft_size must be even")
        if self.window not in WINDOWS:
            raise InvalidInputError(f"unsupported window {self.window!r}")
        if self.bin_policy not in BIN_POLICIES:
            raise InvalidInputError(f"unsupported bin_policy {self.bin_policy!r}")

    @property
    def n_bins(self) -> int:
        """Retained bin count F (Nyquist excluded)."""
        return self.fft_size // 2

    def n_frames(self, length: int) -> int:
        if self.center_pad:
            return 1 + length // self.hop_length
        return 1 + (length - self.fft_size) // self.hop_length

    def analysis_window(self, dtype=torch.float32) -> torch.Tensor:
        # periodic Hamming, the usual choice for overlap-add analysis
        return torch.hamming_window(self.win_length, periodic=True, dtype=dtype)


@dataclass
class ComplexSpectrogram:
    """Complex STFT of shape ``(..., T, F)``.

    ``nyquist`` holds the split-off highest bin, shape ``(..., T)``.  It is
    None for spectrograms built from scratch, in which case synthesis
    treats it as zero.
    """

    data: torch.Tensor
    config: StftConfig
    source_length: Optional[int]
    nyquist: Optional[torch.Tensor] = None

    @property
    def shape(self):
        return tuple(self.data.shape)

    def __mul__(self, scalar):
        nyq = None if self.nyquist is None else self.nyquist * scalar
        return replace(self, data=self.data * scalar, nyquist=nyq)

    __rmul__ = __mul__


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x))


def stft(waveform, config: StftConfig = StftConfig()) -> ComplexSpectrogram:
    """Analyse a real waveform of shape ``(L,)`` or ``(B, L)``.

    Reflect-pads ``fft_size // 2`` samples at each end when ``center_pad`` is
    set, giving ``T = 1 + L // hop`` frames.
    """
    x = _as_tensor(waveform)
    if not x.is_floating_point():
        x = x.to(torch.float64)
    if x.numel() == 0 or x.shape[-1] == 0:
        raise InvalidInputError("empty waveform")
    if not torch.isfinite(x).all():
        raise InvalidInputError("waveform contains non-finite samples")
    length = x.shape[-1]
    if config.center_pad and length <= config.fft_size // 2:
        raise InvalidInputError(
            f"waveform of {length} samples is too short for reflect padding "
            f"(need more than {config.fft_size // 2})")
    if not config.center_pad and length < config.fft_size:
        raise InvalidInputError(f"waveform shorter than one frame ({length})")

    spec = torch.stft(
        x,
        n_fft=config.fft_size,
        hop_length=config.hop_length,
        win_length=config.win_length,
        window=config.analysis_window(x.dtype).to(x.device),
        center=config.center_pad,
        pad_mode="reflect",
        return_complex=True,
    ).transpose(-1, -2)
    f = config.n_bins
    return ComplexSpectrogram(spec[..., :f], config, length, spec[..., f])


def istft(spec: ComplexSpectrogram) -> torch.Tensor:
    """Overlap-add synthesis; returns ``source_length`` samples."""
    if spec.source_length is None:
        raise InvalidInputError("spectrogram carries no source_length")
    cfg = spec.config
    data = spec.data
    if data.shape[-1] != cfg.n_bins:
        raise DimensionError(f"expected {cfg.n_bins} bins, got {data.shape[-1]}")
    nyq = spec.nyquist
    if nyq is None:
        nyq = torch.zeros(data.shape[:-1], dtype=data.dtype, device=data.device)
    full = torch.cat([data, nyq.unsqueeze(-1)], dim=-1).transpose(-1, -2)
    real_dtype = torch.float64 if data.dtype == torch.complex128 else torch.float32
    return torch.istft(
        full,
        n_fft=cfg.fft_size,
        hop_length=cfg.hop_length,
        win_length=cfg.win_length,
        window=cfg.analysis_window(real_dtype).to(data.device),
        center=cfg.center_pad,
        length=spec.source_length,
    )


def apply_mask(spec: ComplexSpectrogram, mask) -> ComplexSpectrogram:
    """Scale each bin by a real mask value, keeping its phase.

    The split-off Nyquist bin reuses the mask of the highest retained bin.
    """
    m = _as_tensor(mask)
    if tuple(m.shape) != tuple(spec.data.shape):
        raise DimensionError(
            f"mask shape {tuple(m.shape)} does not match spectrogram {spec.shape}")
    m = m.to(spec.data.real.dtype)
    nyq = None if spec.nyquist is None else spec.nyquist * m[..., -1]
    return replace(spec, data=spec.data * m, nyquist=nyq)


def magnitude(spec: ComplexSpectrogram) -> torch.Tensor:
    return spec.data.abs()
