"""Self-supervised embedding branch: encoders, frame alignment and fusion.

Two encoder kinds are supported:

``standin``
    A small frozen network (strided framing convolution + one self-attention
    layer) built from a fixed seed.  Its frame hop defaults to 20 ms, the
    same rate as WavLM/wav2vec 2.0, and ``T = floor(L / hop)``.
``external_pretrained``
    A Hugging Face ``transformers`` checkpoint directory (WavLM or
    wav2vec 2.0 family) loaded with ``AutoModel.from_pretrained`` and
    queried with ``output_hidden_states=True``.  Inputs are normalised to
    zero mean / unit variance per utterance, as the feature extractors of
    both families do.

Encoders are always frozen; only the layer-mixing weights are trainable.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .dda import FeedForward, MultiHeadSelfAttention
from .errors import ConfigError, DimensionError, EncoderUnavailableError, InvalidInputError

ENCODER_KINDS = ("standin", "external_pretrained")
FAMILIES = ("wavlm", "wav2vec2")
LAYER_POLICIES = ("last_layer", "weighted_sum_all_layers")
# stand-in seeds are offset per family so "swapping the encoder" changes it
_FAMILY_SEED_OFFSET = {"wavlm": 0, "wav2vec2": 1000}


@dataclass(frozen=True)
class SslEncoderSpec:
    kind: str = "standin"
    family: str = "wavlm"
    identifier: str = ""
    layer_policy: str = "weighted_sum_all_layers"
    output_dim: int = 768
    frame_hop_ms: float = 20.0
    standin_seed: int = 17

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ConfigError(f"ssl.kind must be one of {ENCODER_KINDS}, got {self.kind!r}")
        if self.family not in FAMILIES:
            raise ConfigError(f"ssl.family must be one of {FAMILIES}, got {self.family!r}")
        if self.layer_policy not in LAYER_POLICIES:
            raise ConfigError(f"ssl.layer_policy must be one of {LAYER_POLICIES}")
        if self.output_dim < 1 or self.frame_hop_ms <= 0:
            raise ConfigError("ssl.output_dim must be >= 1 and ssl.frame_hop_ms > 0")


class _Frozen(nn.Module):
    def train(self, mode: bool = True):
        # stays in eval mode whatever the parent does
        return super().train(False)


class StandinEncoder(_Frozen):
    def __init__(self, output_dim=768, frame_hop_ms=20.0, sample_rate=16000, seed=17,
                 width=128, heads=4):
        super().__init__()
        hop = round(frame_hop_ms * sample_rate / 1000)
        pad = hop // 8
        self.hop = hop
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.frame = nn.Conv1d(1, width, kernel_size=hop + 2 * pad, stride=hop, padding=pad)
            self.proj = nn.Conv1d(width, output_dim, kernel_size=3, padding=1)
            self.norm = nn.LayerNorm(output_dim)
            self.attn_norm = nn.LayerNorm(output_dim)
            self.attn = MultiHeadSelfAttention(output_dim, heads)
            self.ff = FeedForward(output_dim, mult=2)
        self.requires_grad_(False)
        self.eval()

    @property
    def num_layers(self) -> int:
        return 3

    def hidden_states(self, waveform: Tensor) -> list[Tensor]:
        x = waveform.unsqueeze(1)
        h = self.proj(F.gelu(self.frame(x))).transpose(1, 2)
        h0 = self.norm(h)
        h1 = h0 + self.attn(self.attn_norm(h0))
        h2 = h1 + self.ff(h1)
        return [h0, h1, h2]


class ExternalEncoder(_Frozen):
    def __init__(self, identifier: str):
        super().__init__()
        if not identifier or not os.path.isdir(identifier):
            raise EncoderUnavailableError(f"no encoder checkpoint directory at {identifier!r}")
        try:
            from transformers import AutoModel
            self.model = AutoModel.from_pretrained(identifier)
        except Exception as exc:  # transformers raises a zoo of types here
            raise EncoderUnavailableError(f"could not load encoder {identifier!r}: {exc}") from exc
        self.requires_grad_(False)
        self.eval()

    @property
    def num_layers(self) -> int:
        return self.model.config.num_hidden_layers + 1

    def hidden_states(self, waveform: Tensor) -> list[Tensor]:
        x = (waveform - waveform.mean(-1, keepdim=True)) / (waveform.std(-1, keepdim=True) + 1e-7)
        out = self.model(x, output_hidden_states=True)
        return list(out.hidden_states)


def build_encoder(spec: SslEncoderSpec, sample_rate: int = 16000) -> nn.Module:
    if spec.kind == "external_pretrained":
        return ExternalEncoder(spec.identifier)
    return StandinEncoder(spec.output_dim, spec.frame_hop_ms, sample_rate,
                          seed=spec.standin_seed + _FAMILY_SEED_OFFSET[spec.family])


class SslBranch(nn.Module):
    """Frozen encoder plus a learned convex combination of its hidden layers."""

    def __init__(self, spec: SslEncoderSpec, sample_rate: int = 16000):
        super().__init__()
        self.spec = spec
        self.encoder = build_encoder(spec, sample_rate)
        n = self.encoder.num_layers if spec.layer_policy == "weighted_sum_all_layers" else 1
        self.layer_logits = nn.Parameter(torch.zeros(n))

    def layer_weights(self) -> Tensor:
        return torch.softmax(self.layer_logits, dim=0)

    def forward(self, waveform: Tensor) -> Tensor:
        """``(B, L)`` waveform -> ``(B, T_ssl, D_ssl)`` features."""
        with torch.no_grad():
            states = self.encoder.hidden_states(waveform)
        if self.spec.layer_policy == "last_layer":
            return states[-1]
        w = self.layer_weights().to(states[0].dtype)
        return sum(wi * h for wi, h in zip(w, states))


def align(features: Tensor, target_t: int) -> Tensor:
    """Linearly resample ``(..., T, D)`` features to ``target_t`` frames.

    Output frames sit at uniformly spaced positions from the first to the last
    input frame, so both endpoints are reproduced exactly.
    """
    if features.shape[-2] == 0:
        raise InvalidInputError("cannot align an empty feature sequence")
    if target_t < 1:
        raise InvalidInputError("target_t must be >= 1")
    t = features.shape[-2]
    if t == target_t:
        return features
    lead = features.shape[:-2]
    x = features.reshape(-1, t, features.shape[-1]).transpose(1, 2)
    if t == 1:
        y = x.expand(-1, -1, target_t)
    else:
        y = F.interpolate(x, size=target_t, mode="linear", align_corners=True)
    return y.transpose(1, 2).reshape(*lead, target_t, features.shape[-1])


def concat_streams(*streams: Tensor) -> Tensor:
    """Frame-wise concatenation along the feature axis."""
    streams = [s for s in streams if s is not None]
    if not streams:
        raise InvalidInputError("nothing to fuse")
    lengths = {s.shape[-2] for s in streams}
    if len(lengths) != 1:
        raise DimensionError(f"streams disagree on frame count: {sorted(lengths)}")
    return torch.cat(streams, dim=-1)


class Fusion(nn.Module):
    """Concatenate the available streams per frame, then project to the model width."""

    def __init__(self, in_dims: list[int], dim: int):
        super().__init__()
        self.in_dims = list(in_dims)
        self.proj = nn.Linear(sum(in_dims), dim)

    def forward(self, *streams: Tensor) -> Tensor:
        x = concat_streams(*streams)
        if x.shape[-1] != sum(self.in_dims):
            raise DimensionError(f"fused width {x.shape[-1]} != expected {sum(self.in_dims)}")
        return self.proj(x)


def standin_frames(n_samples: int, frame_hop_ms: float = 20.0, sample_rate: int = 16000) -> int:
    return n_samples // round(frame_hop_ms * sample_rate / 1000)


__all__ = [
    "SslEncoderSpec", "StandinEncoder", "ExternalEncoder", "SslBranch", "Fusion",
    "build_encoder", "align", "concat_streams", "standin_frames",
]
