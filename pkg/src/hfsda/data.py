"""Paired noisy/clean corpus handling.

Expected layout mirrors VCTK-DEMAND: two directories of mono WAV files whose
file stems pair them up (``noisy/p232_001.wav`` <-> ``clean/p232_001.wav``).
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import signal
from scipy.io import wavfile

from .errors import CorpusError, FormatError

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
SEGMENT_SAMPLES = 24000          # 1.5 s at 16 kHz
MIN_TAIL_SAMPLES = SEGMENT_SAMPLES // 3
AUDIO_SUFFIXES = (".wav",)


@dataclass
class UtterancePair:
    id: str
    noisy: np.ndarray
    clean: np.ndarray


@dataclass(frozen=True)
class PairPaths:
    id: str
    noisy: Path
    clean: Path

    def load(self) -> UtterancePair:
        noisy, clean = ingest(self.noisy), ingest(self.clean)
        if len(noisy) != len(clean):
            raise CorpusError(
                f"{self.id}: noisy has {len(noisy)} samples, clean has {len(clean)}")
        return UtterancePair(self.id, noisy, clean)


@dataclass
class Segment:
    noisy: np.ndarray
    clean: np.ndarray
    source_id: str
    offset: int


@dataclass
class Batch:
    noisy: np.ndarray      # (B, SEGMENT_SAMPLES)
    clean: np.ndarray
    ids: list


def _stems(directory: Path) -> dict:
    return {p.stem: p for p in sorted(directory.iterdir())
            if p.is_file() and p.suffix.lower() in AUDIO_SUFFIXES}


def scan_corpus(noisy_dir, clean_dir) -> list[PairPaths]:
    """Pair files by stem, in lexicographic order; unmatched stems are logged."""
    noisy_dir, clean_dir = Path(noisy_dir), Path(clean_dir)
    for d in (noisy_dir, clean_dir):
        if not d.is_dir():
            raise CorpusError(f"corpus directory does not exist: {d}")
    noisy, clean = _stems(noisy_dir), _stems(clean_dir)
    common = sorted(noisy.keys() & clean.keys())
    for stem in sorted(noisy.keys() ^ clean.keys()):
        side = "noisy" if stem in noisy else "clean"
        log.warning("unmatched %s file %s", side, (noisy if side == "noisy" else clean)[stem])
    if not common:
        raise CorpusError(
            f"no paired files: {len(noisy)} noisy in {noisy_dir}, {len(clean)} clean in {clean_dir}")
    return [PairPaths(s, noisy[s], clean[s]) for s in common]


def ingest(path) -> np.ndarray:
    """Decode a mono PCM/float WAV to float64 in [-1, 1] at 16 kHz.

    48 kHz files are downsampled by 3 with ``scipy.signal.resample_poly``
    (Kaiser-windowed FIR, beta 5.0, the scipy default design).
    """
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        raise FormatError(f"{path}: unreadable WAV ({exc})") from exc
    if data.ndim != 1:
        raise FormatError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported sample type {data.dtype}")
    if rate == SAMPLE_RATE:
        return x
    if rate == 3 * SAMPLE_RATE:
        return signal.resample_poly(x, 1, 3)
    raise FormatError(f"{path}: unsupported sample rate {rate} Hz (need 16000 or 48000)")


def write_wav(path, samples, rate: int = SAMPLE_RATE) -> None:
    """Write 16-bit PCM, clipping to [-1, 1)."""
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 32767 / 32768)
    wavfile.write(path, rate, np.round(x * 32768).astype(np.int16))


def load_pairs(pairs: Sequence[PairPaths], workers: int = 1) -> list[UtterancePair]:
    if workers <= 1:
        return [p.load() for p in pairs]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(PairPaths.load, pairs))


def segment(pair: UtterancePair, length: int = SEGMENT_SAMPLES,
            min_tail: int = MIN_TAIL_SAMPLES) -> list[Segment]:
    """Cut into non-overlapping windows; a tail of at least ``min_tail``
    samples is zero-padded to full length, shorter tails are dropped."""
    n = len(pair.noisy)
    out = []
    for offset in range(0, n, length):
        piece = n - offset
        if piece < length and piece < min_tail:
            break
        noisy = np.zeros(length)
        clean = np.zeros(length)
        take = min(piece, length)
        noisy[:take] = pair.noisy[offset:offset + take]
        clean[:take] = pair.clean[offset:offset + take]
        out.append(Segment(noisy, clean, pair.id, offset))
    return out


def batches(segments: Sequence[Segment], batch_size: int, seed: int,
            epoch: int = 0) -> Iterator[Batch]:
    """Shuffle with a generator keyed on (seed, epoch); keep the short last batch."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng([seed, epoch]).permutation(len(segments))
    for start in range(0, len(order), batch_size):
        chosen = [segments[i] for i in order[start:start + batch_size]]
        yield Batch(np.stack([s.noisy for s in chosen]),
                    np.stack([s.clean for s in chosen]),
                    [f"{s.source_id}@{s.offset}" for s in chosen])


def n_batches(n_segments: int, batch_size: int) -> int:
    return math.ceil(n_segments / batch_size)


def split_validation(pairs: Sequence, fraction: float, seed: int):
    """Seeded hold-out of ``fraction`` of the pairs (at least one when n >= 2)."""
    n = len(pairs)
    if fraction <= 0 or n < 2:
        return list(pairs), []
    n_val = min(n - 1, max(1, int(n * fraction)))
    idx = np.random.default_rng(seed).permutation(n)
    val = set(idx[:n_val].tolist())
    return ([p for i, p in enumerate(pairs) if i not in val],
            [p for i, p in enumerate(pairs) if i in val])
