"""Dual-dimension attention blocks.

``DDABlock`` is a Conformer block whose convolution module is replaced by
frequency-axis attention (``FreqLiteAttention``): temporal context comes from
multi-head self-attention, spectral weighting from FA.  The plain Conformer
block and the Conformer-with-FA variant live here too, for ablations.

All modules take ``(B, T, D)`` or ``(T, D)`` inputs.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError, DimensionError

BLOCK_KINDS = ("dda", "conformer", "conformer_fa")


def _time_mean(x: Tensor) -> Tensor:
    # sorted before summing so the result is bitwise independent of frame order
    return torch.sort(x, dim=-2).values.mean(dim=-2)


def fa_weights(x: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """sigmoid(avgpool_t(x) @ w1 + maxpool_t(x) @ w2), shape ``(..., D)``."""
    d = x.shape[-1]
    if w1.shape != (d, d) or w2.shape != (d, d):
        raise DimensionError(
            f"FA maps must be ({d}, {d}), got {tuple(w1.shape)} and {tuple(w2.shape)}")
    return torch.sigmoid(_time_mean(x) @ w1 + x.amax(dim=-2) @ w2)


def fa_apply(x: Tensor, u: Tensor) -> Tensor:
    """Broadcast ``u`` over the time axis and rescale ``x`` with it."""
    if u.shape[-1] != x.shape[-1]:
        raise DimensionError(f"weight width {u.shape[-1]} != feature width {x.shape[-1]}")
    return u.unsqueeze(-2) * x


class FreqLiteAttention(nn.Module):
    """Frequency-axis attention from time-pooled statistics (no bias terms)."""

    def __init__(self, dim: int):
        super().__init__()
        self.w1 = nn.Parameter(torch.empty(dim, dim))
        self.w2 = nn.Parameter(torch.empty(dim, dim))
        nn.init.xavier_uniform_(self.w1)
        nn.init.xavier_uniform_(self.w2)

    def weights(self, x: Tensor) -> Tensor:
        return fa_weights(x, self.w1, self.w2)

    def forward(self, x: Tensor) -> Tensor:
        return fa_apply(x, self.weights(x))


class MultiHeadSelfAttention(nn.Module):
    """Scaled dot-product self-attention over the time axis."""

    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"model width {dim} is not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.attn_dropout = nn.Dropout(dropout)

    def forward(self, x: Tensor, return_weights: bool = False):
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        b, t, d = x.shape
        if d != self.dim:
            raise DimensionError(f"expected width {self.dim}, got {d}")
        hd = d // self.heads
        q, k, v = self.qkv(x).view(b, t, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        weights = torch.softmax(scores, dim=-1)              # (B, h, T, T)
        y = self.attn_dropout(weights) @ v
        y = self.out(y.transpose(1, 2).reshape(b, t, d))
        if squeeze:
            y, weights = y.squeeze(0), weights.squeeze(0)
        return (y, weights) if return_weights else y


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 4, dropout: float = 0.0):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.lin1 = nn.Linear(dim, mult * dim)
        self.lin2 = nn.Linear(mult * dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        h = self.dropout(F.silu(self.lin1(self.norm(x))))
        return self.dropout(self.lin2(h))


class ConvModule(nn.Module):
    """Conformer convolution module: pointwise, GLU, depthwise, BN, swish, pointwise."""

    def __init__(self, dim: int, kernel_size: int = 31, dropout: float = 0.0):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ConfigError("depthwise kernel size must be odd")
        self.norm = nn.LayerNorm(dim)
        self.pointwise1 = nn.Conv1d(dim, 2 * dim, 1)
        self.depthwise = nn.Conv1d(dim, dim, kernel_size, padding=kernel_size // 2, groups=dim)
        self.batch_norm = nn.BatchNorm1d(dim)
        self.pointwise2 = nn.Conv1d(dim, dim, 1)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        h = self.norm(x).transpose(1, 2)
        h = F.glu(self.pointwise1(h), dim=1)
        h = F.silu(self.batch_norm(self.depthwise(h)))
        h = self.dropout(self.pointwise2(h)).transpose(1, 2)
        return h.squeeze(0) if squeeze else h


class DDABlock(nn.Module):
    """Macaron FF -> MHSA -> FA -> macaron FF -> LayerNorm, all residual.

    The FA branch takes the slot of the Conformer convolution module,
    including its pre-norm and residual connection.
    """

    def __init__(self, dim: int = 256, heads: int = 4, ff_mult: int = 4, dropout: float = 0.1):
        super().__init__()
        self.ff1 = FeedForward(dim, ff_mult, dropout)
        self.mhsa_norm = nn.LayerNorm(dim)
        self.mhsa = MultiHeadSelfAttention(dim, heads, dropout)
        self.mhsa_dropout = nn.Dropout(dropout)
        self.fa_norm = nn.LayerNorm(dim)
        self.fa = FreqLiteAttention(dim)
        self.ff2 = FeedForward(dim, ff_mult, dropout)
        self.final_norm = nn.LayerNorm(dim)

    def forward(self, x):
        a = x + 0.5 * self.ff1(x)
        m = a + self.mhsa_dropout(self.mhsa(self.mhsa_norm(a)))
        z = m + self.fa(self.fa_norm(m))
        return self.final_norm(z + 0.5 * self.ff2(z))


class ConformerBlock(nn.Module):
    """Standard Conformer block; ``with_fa`` adds an FA branch between MHSA and conv."""

    def __init__(self, dim: int = 256, heads: int = 4, ff_mult: int = 4,
                 kernel_size: int = 31, dropout: float = 0.1, with_fa: bool = False):
        super().__init__()
        self.ff1 = FeedForward(dim, ff_mult, dropout)
        self.mhsa_norm = nn.LayerNorm(dim)
        self.mhsa = MultiHeadSelfAttention(dim, heads, dropout)
        self.mhsa_dropout = nn.Dropout(dropout)
        if with_fa:
            self.fa_norm = nn.LayerNorm(dim)
            self.fa = FreqLiteAttention(dim)
        else:
            self.fa = None
        self.conv = ConvModule(dim, kernel_size, dropout)
        self.ff2 = FeedForward(dim, ff_mult, dropout)
        self.final_norm = nn.LayerNorm(dim)

    def forward(self, x):
        x = x + 0.5 * self.ff1(x)
        x = x + self.mhsa_dropout(self.mhsa(self.mhsa_norm(x)))
        if self.fa is not None:
            x = x + self.fa(self.fa_norm(x))
        x = x + self.conv(x)
        return self.final_norm(x + 0.5 * self.ff2(x))


def make_block(kind: str, dim: int, heads: int, ff_mult: int = 4,
               conv_kernel: int = 31, dropout: float = 0.1) -> nn.Module:
    if kind == "dda":
        return DDABlock(dim, heads, ff_mult, dropout)
    if kind == "conformer":
        return ConformerBlock(dim, heads, ff_mult, conv_kernel, dropout)
    if kind == "conformer_fa":
        return ConformerBlock(dim, heads, ff_mult, conv_kernel, dropout, with_fa=True)
    raise ConfigError(f"unknown block kind {kind!r}; expected one of {BLOCK_KINDS}")


def sinusoidal_positions(t: int, dim: int, dtype=torch.float32) -> Tensor:
    """Absolute sinusoidal position table, shape ``(t, dim)``."""
    pos = torch.arange(t, dtype=torch.float64).unsqueeze(1)
    freq = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    table = torch.zeros(t, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq[: dim // 2])
    return table.to(dtype)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
