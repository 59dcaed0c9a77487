"""Omni-dimensional dynamic convolution over (time, frequency) feature maps.

A bank of ``n`` kernels is reweighted per input sample along four axes
(kernel-time location, kernel-frequency location, output channel, kernel
index), summed into one kernel, and then convolved with that sample.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import DimensionError, InvalidInputError


@dataclass
class OmniAttention:
    """Per-sample attention tensors for a bank of ``n`` kernels.

    Shapes: ``alpha_s (B, n, k_t)``, ``alpha_c (B, n, k_f)``,
    ``alpha_f (B, n, c_out)``, ``alpha_w (B, n)``.
    """

    alpha_s: Tensor
    alpha_c: Tensor
    alpha_f: Tensor
    alpha_w: Tensor

    @classmethod
    def constant(cls, batch, n, k_t, k_f, c_out, value=1.0, dtype=torch.float64):
        """All four tensors filled with ``value`` (useful to switch attention off)."""
        full = lambda *shape: torch.full(shape, float(value), dtype=dtype)
        return cls(full(batch, n, k_t), full(batch, n, k_f),
                   full(batch, n, c_out), full(batch, n))

    @property
    def n_kernels(self) -> int:
        return self.alpha_w.shape[-1]


class ODConv2d(nn.Module):
    """Dynamic 2-D convolution with four-axis kernel attention.

    Args:
        in_channels, out_channels: channel counts.
        kernel_size: ``k`` or ``(k_t, k_f)``.
        n_kernels: size of the kernel bank.
        reduction: bottleneck ratio; hidden width is ``max(ceil(c_in / r), 4)``.
        stride: convolution stride.
        padding: explicit padding, or None for "same" padding at stride 1.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size=3,
                 n_kernels: int = 4, reduction: int = 4, stride: int = 1,
                 padding=None):
        super().__init__()
        if n_kernels < 1:
            raise InvalidInputError("n_kernels must be >= 1")
        k_t, k_f = (kernel_size, kernel_size) if isinstance(kernel_size, int) else kernel_size
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = (k_t, k_f)
        self.n_kernels = n_kernels
        self.stride = stride
        self.padding = (k_t // 2, k_f // 2) if padding is None else _pair(padding)
        hidden = max(math.ceil(in_channels / reduction), 4)
        self.hidden = hidden

        self.weight = nn.Parameter(torch.empty(n_kernels, out_channels, in_channels, k_t, k_f))
        # bias-free bottleneck: a zero input maps to zero hidden activity
        self.fc = nn.Linear(in_channels, hidden, bias=False)
        self.time_head = nn.Linear(hidden, n_kernels * k_t)
        self.freq_head = nn.Linear(hidden, n_kernels * k_f)
        self.channel_head = nn.Linear(hidden, n_kernels * out_channels)
        self.kernel_head = nn.Linear(hidden, n_kernels)
        self.reset_parameters()

    def reset_parameters(self):
        for i in range(self.n_kernels):
            nn.init.kaiming_normal_(self.weight.data[i], mode="fan_out", nonlinearity="relu")
        nn.init.kaiming_normal_(self.fc.weight, mode="fan_out", nonlinearity="relu")
        for head in (self.time_head, self.freq_head, self.channel_head, self.kernel_head):
            nn.init.kaiming_normal_(head.weight, mode="fan_out", nonlinearity="relu")
            nn.init.zeros_(head.bias)

    def compute_attention(self, x: Tensor) -> OmniAttention:
        """Attention from the global average of ``x`` (B, c_in, T, F)."""
        if not torch.isfinite(x).all():
            raise InvalidInputError("non-finite input to ODConv attention")
        b = x.shape[0]
        n, (k_t, k_f) = self.n_kernels, self.kernel_size
        h = F.relu(self.fc(x.mean(dim=(-2, -1))))
        return OmniAttention(
            alpha_s=torch.sigmoid(self.time_head(h)).view(b, n, k_t),
            alpha_c=torch.sigmoid(self.freq_head(h)).view(b, n, k_f),
            alpha_f=torch.sigmoid(self.channel_head(h)).view(b, n, self.out_channels),
            alpha_w=torch.softmax(self.kernel_head(h), dim=-1),
        )

    def assemble_kernel(self, attn: OmniAttention) -> Tensor:
        """Sum_i alpha_w,i * alpha_f,i * alpha_c,i * alpha_s,i * W_i, per sample.

        Returns shape ``(B, c_out, c_in, k_t, k_f)``.
        """
        n, (k_t, k_f) = self.n_kernels, self.kernel_size
        b = attn.alpha_w.shape[0]
        expected = {"alpha_s": (b, n, k_t), "alpha_c": (b, n, k_f),
                    "alpha_f": (b, n, self.out_channels), "alpha_w": (b, n)}
        for name, shape in expected.items():
            got = tuple(getattr(attn, name).shape)
            if got != shape:
                raise DimensionError(f"{name} has shape {got}, expected {shape}")
        w = self.weight.unsqueeze(0)                         # (1, n, o, i, kt, kf)
        w = attn.alpha_s[:, :, None, None, :, None] * w      # time location
        w = attn.alpha_c[:, :, None, None, None, :] * w      # frequency location
        w = attn.alpha_f[:, :, :, None, None, None] * w      # output channel
        w = attn.alpha_w[:, :, None, None, None, None] * w   # whole kernel
        return w.sum(dim=1)

    def forward(self, x: Tensor, attn: Optional[OmniAttention] = None) -> Tensor:
        """Convolve ``x`` (B, c_in, T, F) with its own assembled kernel.

        Passing ``attn`` bypasses the attention network.
        """
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(
                f"expected (B, {self.in_channels}, T, F) input, got {tuple(x.shape)}")
        b, _, t, f = x.shape
        (k_t, k_f), (p_t, p_f) = self.kernel_size, self.padding
        if k_t > t + 2 * p_t or k_f > f + 2 * p_f:
            raise DimensionError(
                f"kernel {self.kernel_size} larger than padded input {(t + 2 * p_t, f + 2 * p_f)}")
        if attn is None:
            attn = self.compute_attention(x)
        kernel = self.assemble_kernel(attn)
        out = F.conv2d(
            x.reshape(1, b * self.in_channels, t, f),
            kernel.reshape(b * self.out_channels, self.in_channels, k_t, k_f),
            stride=self.stride, padding=self.padding, groups=b,
        )
        return out.view(b, self.out_channels, out.shape[-2], out.shape[-1])

    def extra_repr(self):
        return (f"{self.in_channels}, {self.out_channels}, kernel_size={self.kernel_size}, "
                f"n_kernels={self.n_kernels}, hidden={self.hidden}")


def _pair(p):
    return (p, p) if isinstance(p, int) else tuple(p)


def static_conv2d(x: Tensor, weight: Tensor, stride=1, padding=None) -> Tensor:
    """Plain convolution with one kernel ``(c_out, c_in, k_t, k_f)``."""
    k_t, k_f = weight.shape[-2:]
    pad = (k_t // 2, k_f // 2) if padding is None else _pair(padding)
    return F.conv2d(x, weight, stride=stride, padding=pad)
