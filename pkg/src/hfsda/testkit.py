"""Reference oracles and fixtures.

Everything here is deliberately naive and shares no code with the modules it
checks: finite differences instead of autograd, nested loops instead of
batched convolution, scalar ``math`` instead of tensor ops.  All oracles run
in float64.
"""
from __future__ import annotations

import itertools
import json
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import signal

from .errors import DimensionError, OracleError

SNR_GRID_DB = (0.0, 5.0, 10.0, 15.0)
MAX_BRUTEFORCE_MACS = 10_000


def seed_everything(seed: int) -> None:
    import torch

    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


@dataclass(frozen=True)
class GradCheckSpec:
    """Central-difference gradient check settings.

    ``tolerance`` bounds the norm-wise relative error
    ``|g_analytic - g_fd| / max(|g_analytic|, |g_fd|)`` per parameter tensor.
    ``select`` filters parameter names; None checks all of them.
    """

    step: float = 1e-3
    tolerance: float = 1e-4
    select: Optional[Callable[[str], bool]] = None

    def __post_init__(self):
        if self.step <= 0 or self.tolerance <= 0:
            raise ValueError("step and tolerance must be positive")


def finite_diff_grad(fn: Callable[[np.ndarray], float], point, step: float = 1e-3) -> np.ndarray:
    """(fn(x + h e_i) - fn(x - h e_i)) / 2h for every coordinate i."""
    x = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = float(fn(x))
        flat[i] = orig - step
        down = float(fn(x))
        flat[i] = orig
        if not (math.isfinite(up) and math.isfinite(down)):
            raise OracleError(f"non-finite function value at coordinate {i}")
        gflat[i] = (up - down) / (2 * step)
    return grad


def relative_error(a, b) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def gradcheck_module(module, loss_fn: Callable[[], "object"],
                     spec: GradCheckSpec = GradCheckSpec()) -> dict:
    """Compare autograd gradients of ``loss_fn()`` with finite differences.

    ``module`` must already be float64.  Returns ``{param_name: rel_error}``.
    """
    import torch

    params = [(n, p) for n, p in module.named_parameters()
              if p.requires_grad and (spec.select is None or spec.select(n))]
    module.zero_grad()
    loss_fn().backward()
    analytic = {n: p.grad.detach().numpy().copy() for n, p in params}

    errors = {}
    for name, p in params:
        base = p.detach().numpy().copy()

        def at(values, p=p):
            with torch.no_grad():
                p.copy_(torch.from_numpy(values))
                return float(loss_fn())

        numeric = finite_diff_grad(at, base, spec.step)
        with torch.no_grad():
            p.copy_(torch.from_numpy(base))
        errors[name] = relative_error(analytic[name], numeric)
    return errors


def bruteforce_eq1(kernels, alpha_s, alpha_c, alpha_f, alpha_w, x, padding=None, stride=1):
    """Literal loop evaluation of the attention-weighted kernel sum, then convolution.

    kernels ``(n, c_out, c_in, k_t, k_f)``; alpha_s ``(n, k_t)``;
    alpha_c ``(n, k_f)``; alpha_f ``(n, c_out)``; alpha_w ``(n,)``;
    x ``(c_in, T, F)``.  Zero padding, "same" by default.  Cross-correlation,
    matching the deep-learning convention for "convolution".
    """
    kernels = np.asarray(kernels, np.float64)
    x = np.asarray(x, np.float64)
    n, c_out, c_in, k_t, k_f = kernels.shape
    if x.shape[0] != c_in:
        raise DimensionError(f"input has {x.shape[0]} channels, kernels expect {c_in}")
    for name, arr, shape in (("alpha_s", alpha_s, (n, k_t)), ("alpha_c", alpha_c, (n, k_f)),
                             ("alpha_f", alpha_f, (n, c_out)), ("alpha_w", alpha_w, (n,))):
        if np.shape(arr) != shape:
            raise DimensionError(f"{name} has shape {np.shape(arr)}, expected {shape}")
    p_t, p_f = (k_t // 2, k_f // 2) if padding is None else (
        (padding, padding) if isinstance(padding, int) else padding)
    _, t, f = x.shape
    t_out = (t + 2 * p_t - k_t) // stride + 1
    f_out = (f + 2 * p_f - k_f) // stride + 1
    macs = c_out * c_in * k_t * k_f * (n + t_out * f_out)
    if macs > MAX_BRUTEFORCE_MACS:
        raise OracleError(f"{macs} multiply-adds exceeds the brute-force budget")

    agg = np.zeros((c_out, c_in, k_t, k_f))
    for i, o, c, a, b in itertools.product(range(n), range(c_out), range(c_in),
                                           range(k_t), range(k_f)):
        agg[o, c, a, b] += (alpha_w[i] * alpha_f[i][o] * alpha_c[i][b]
                            * alpha_s[i][a] * kernels[i, o, c, a, b])

    out = np.zeros((c_out, t_out, f_out))
    for o, ti, fi in itertools.product(range(c_out), range(t_out), range(f_out)):
        acc = 0.0
        for c, a, b in itertools.product(range(c_in), range(k_t), range(k_f)):
            tt = ti * stride + a - p_t
            ff = fi * stride + b - p_f
            if 0 <= tt < t and 0 <= ff < f:
                acc += agg[o, c, a, b] * x[c, tt, ff]
        out[o, ti, fi] = acc
    return out


def fa_hand(x, w1, w2) -> np.ndarray:
    """Frequency attention weights computed one scalar at a time."""
    x = np.asarray(x, np.float64)
    t, d = x.shape
    mean = [sum(x[r][j] for r in range(t)) / t for j in range(d)]
    peak = [max(x[r][j] for r in range(t)) for j in range(d)]
    u = np.zeros(d)
    for j in range(d):
        z = sum(w1[i][j] * mean[i] for i in range(d)) + sum(w2[i][j] * peak[i] for i in range(d))
        u[j] = 1.0 / (1.0 + math.exp(-z))
    return u


def measured_snr_db(clean, noisy) -> float:
    clean = np.asarray(clean, np.float64)
    noise = np.asarray(noisy, np.float64) - clean
    return 10 * math.log10((clean @ clean) / (noise @ noise))


def _harmonic_clean(rng, n, sr):
    t = np.arange(n) / sr
    f0 = rng.uniform(100, 250)
    x = np.zeros(n)
    for h in range(1, rng.integers(2, 5) + 1):
        x += rng.uniform(0.3, 1.0) / h * np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 2 * np.pi))
    # slow syllable-rate envelope
    x *= 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(2, 5) * t + rng.uniform(0, 2 * np.pi))
    return 0.25 * x / np.max(np.abs(x))


def _shaped_noise(rng, n, sr):
    white = rng.standard_normal(n)
    kind = rng.choice(["lowpass", "highpass", "bandpass"])
    if kind == "bandpass":
        lo = rng.uniform(200, 1500)
        wn = [lo / (sr / 2), min(lo * rng.uniform(2, 5), 7000) / (sr / 2)]
    else:
        wn = rng.uniform(500, 4000) / (sr / 2)
    b, a = signal.butter(2, wn, btype=kind)
    return signal.lfilter(b, a, white)


def make_mini_corpus(directory, seed: int = 0, n_pairs: int = 10, sr: int = 16000) -> list[dict]:
    """Write ``n_pairs`` synthetic noisy/clean pairs under ``directory``.

    Layout: ``clean/mini_XXX.wav``, ``noisy/mini_XXX.wav`` (16-bit mono PCM)
    plus ``manifest.json`` with each pair's SNR label and length.  Pair ``i``
    uses SNR ``SNR_GRID_DB[i % 4]``; lengths are uniform in 1.2-4.0 s.
    """
    from .data import write_wav

    root = Path(directory)
    (root / "clean").mkdir(parents=True, exist_ok=True)
    (root / "noisy").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    manifest = []
    for i in range(n_pairs):
        n = int(rng.uniform(1.2, 4.0) * sr)
        clean = _harmonic_clean(rng, n, sr)
        noise = _shaped_noise(rng, n, sr)
        snr = SNR_GRID_DB[i % len(SNR_GRID_DB)]
        noise *= math.sqrt((clean @ clean) / (noise @ noise) / 10 ** (snr / 10))
        name = f"mini_{i:03d}"
        write_wav(root / "clean" / f"{name}.wav", clean, sr)
        write_wav(root / "noisy" / f"{name}.wav", clean + noise, sr)
        manifest.append({"id": name, "snr_db": snr, "samples": n})
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest
