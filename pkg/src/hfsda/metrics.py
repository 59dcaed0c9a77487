"""Objective quality and intelligibility scores.

Native: STOI, SI-SDR, segmental SNR.  PESQ and the CSIG/CBAK/COVL
composites come from external commands (see ``run_external``).

STOI constants (canonical short-time objective intelligibility definition):

=====================  ==========================================
internal sample rate   10 kHz (inputs resampled with resample_poly)
frame                  256 samples, Hann, 50 % overlap
FFT size               512
bands                  15 one-third-octave bands, lowest centre 150 Hz
segment                30 frames (384 ms)
clipping bound         beta = -15 dB
silent-frame removal   frames more than 40 dB below the loudest
                       reference frame are dropped
=====================  ==========================================
"""
from __future__ import annotations

import json
import logging
import math
import re
import shlex
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import signal

from .errors import ConfigError, CorpusError, InvalidInputError

log = logging.getLogger(__name__)

STOI_FS = 10000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEGMENT = 30
STOI_BETA_DB = -15.0
STOI_DYN_RANGE_DB = 40.0

SI_SDR_CAP_DB = 100.0
METRIC_FIELDS = ("stoi", "si_sdr", "seg_snr", "pesq", "csig", "cbak", "covl")

_EPS = np.finfo(np.float64).eps


def _pair(estimate, reference):
    est = np.asarray(estimate, dtype=np.float64).ravel()
    ref = np.asarray(reference, dtype=np.float64).ravel()
    if est.shape != ref.shape:
        raise InvalidInputError(f"length mismatch: {est.size} vs {ref.size}")
    return est, ref


def third_octave_matrix(fs=STOI_FS, nfft=STOI_NFFT, n_bands=STOI_BANDS, min_freq=STOI_MIN_FREQ):
    """(n_bands, nfft//2 + 1) 0/1 matrix grouping FFT bins into 1/3-octave bands."""
    f = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(n_bands)
    lo = min_freq * 2.0 ** ((2 * k - 1) / 6)
    hi = min_freq * 2.0 ** ((2 * k + 1) / 6)
    obm = np.zeros((n_bands, f.size))
    for i in range(n_bands):
        a = int(np.argmin((f - lo[i]) ** 2))
        b = int(np.argmin((f - hi[i]) ** 2))
        obm[i, a:b] = 1.0
    return obm


def _hann(n):
    return np.hanning(n + 2)[1:-1]


def _frames(x, n, hop):
    starts = range(0, len(x) - n, hop)
    return np.array([x[s:s + n] for s in starts]).reshape(-1, n)


def _drop_silent_frames(ref, est, dyn_range, n, hop):
    """Drop frames quieter than ``max - dyn_range`` dB (judged on ``ref``), then
    overlap-add the remaining windowed frames back into signals."""
    w = _hann(n)
    ref_f = _frames(ref, n, hop) * w
    est_f = _frames(est, n, hop) * w
    energy = 20 * np.log10(np.linalg.norm(ref_f, axis=1) + _EPS)
    keep = energy > energy.max() - dyn_range
    ref_f, est_f = ref_f[keep], est_f[keep]
    count = len(ref_f)
    out_len = (count - 1) * hop + n if count else 0
    ref_out = np.zeros(out_len)
    est_out = np.zeros(out_len)
    for i in range(count):
        ref_out[i * hop:i * hop + n] += ref_f[i]
        est_out[i * hop:i * hop + n] += est_f[i]
    return ref_out, est_out


def _band_envelopes(x):
    w = _hann(STOI_FRAME)
    spec = np.fft.rfft(_frames(x, STOI_FRAME, STOI_FRAME // 2) * w, n=STOI_NFFT, axis=1)
    return np.sqrt(third_octave_matrix() @ (np.abs(spec) ** 2).T)   # (bands, frames)


def stoi(estimate, reference, sr: int = 16000) -> float:
    """Short-time objective intelligibility of ``estimate`` against ``reference``."""
    est, ref = _pair(estimate, reference)
    if sr != STOI_FS:
        g = math.gcd(STOI_FS, sr)
        ref = signal.resample_poly(ref, STOI_FS // g, sr // g)
        est = signal.resample_poly(est, STOI_FS // g, sr // g)
    if len(ref) <= STOI_FRAME:
        raise InvalidInputError("signal too short for STOI")
    ref, est = _drop_silent_frames(ref, est, STOI_DYN_RANGE_DB, STOI_FRAME, STOI_FRAME // 2)
    x_env, y_env = _band_envelopes(ref), _band_envelopes(est)
    n_frames = x_env.shape[1]
    if n_frames < STOI_SEGMENT:
        raise InvalidInputError(
            f"only {n_frames} speech-active frames; STOI needs {STOI_SEGMENT} (384 ms)")

    clip = 10 ** (-STOI_BETA_DB / 20)
    scores = []
    for m in range(STOI_SEGMENT, n_frames + 1):
        xs = x_env[:, m - STOI_SEGMENT:m]
        ys = y_env[:, m - STOI_SEGMENT:m]
        scale = np.linalg.norm(xs, axis=1, keepdims=True) / (
            np.linalg.norm(ys, axis=1, keepdims=True) + _EPS)
        yn = np.minimum(ys * scale, xs * (1 + clip))
        xc = xs - xs.mean(axis=1, keepdims=True)
        yc = yn - yn.mean(axis=1, keepdims=True)
        xc /= np.linalg.norm(xc, axis=1, keepdims=True) + _EPS
        yc /= np.linalg.norm(yc, axis=1, keepdims=True) + _EPS
        scores.append(np.sum(xc * yc, axis=1))
    return float(np.mean(scores))


def si_sdr(estimate, reference) -> float:
    """Scale-invariant SDR in dB, reported within [-100, 100]."""
    est, ref = _pair(estimate, reference)
    ref_energy = ref @ ref
    if ref_energy == 0:
        raise InvalidInputError("reference is all zeros")
    target = (est @ ref) / ref_energy * ref
    err = est - target
    num, den = target @ target, err @ err
    if num == 0:
        return -SI_SDR_CAP_DB
    if den == 0 or num / den > 10 ** (SI_SDR_CAP_DB / 10):
        return SI_SDR_CAP_DB
    return float(max(10 * math.log10(num / den), -SI_SDR_CAP_DB))


def seg_snr(estimate, reference, sr: int = 16000, frame_ms: float = 30.0,
            clamp=(-10.0, 35.0)) -> float:
    """Mean per-frame SNR over non-overlapping frames, each clamped to ``clamp``.

    Frame SNR is reference energy over error energy.  A trailing partial frame
    is ignored unless the signal is shorter than one frame.
    """
    est, ref = _pair(estimate, reference)
    n = max(1, int(round(sr * frame_ms / 1000)))
    count = max(1, len(ref) // n)
    lo, hi = clamp
    vals = []
    for i in range(count):
        r = ref[i * n:(i + 1) * n]
        e = r - est[i * n:(i + 1) * n]
        sig, noise = r @ r, e @ e
        if noise == 0:
            vals.append(hi)
        elif sig == 0:
            vals.append(lo)
        else:
            vals.append(min(max(10 * math.log10(sig / noise), lo), hi))
    return float(np.mean(vals))


_FLOAT = re.compile(r"[-+]?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][-+]?\d+)?")


def check_command_template(template: str, key: str) -> None:
    if "{ref}" not in template or "{est}" not in template:
        raise ConfigError(f"{key} must contain both {{ref}} and {{est}} placeholders")


def run_external(template: Optional[str], reference_path, estimate_path, n_values: int = 1,
                 timeout: float = 600.0) -> Optional[list[float]]:
    """Run an external scorer and return the last ``n_values`` numbers it prints.

    ``template`` is a shell-style command with ``{ref}`` and ``{est}``
    placeholders.  Any failure (no template, missing executable, nonzero
    exit, too few numbers on stdout) logs a warning and returns None.
    """
    if not template:
        return None
    argv = [a.format(ref=str(reference_path), est=str(estimate_path))
            for a in shlex.split(template)]
    try:
        proc = subprocess.run(argv, capture_output=True, text=True, timeout=timeout)
    except (FileNotFoundError, PermissionError) as exc:
        log.warning("external scorer unavailable (%s): %s", argv[0], exc)
        return None
    except subprocess.TimeoutExpired:
        log.warning("external scorer timed out on %s", estimate_path)
        return None
    if proc.returncode != 0:
        log.warning("external scorer exited %d on %s: %s", proc.returncode,
                    estimate_path, proc.stderr.strip()[-200:])
        return None
    nums = _FLOAT.findall(proc.stdout)
    if len(nums) < n_values:
        log.warning("could not parse %d score(s) from scorer output for %s", n_values, estimate_path)
        return None
    return [float(v) for v in nums[-n_values:]]


def external_pesq(estimate_path, reference_path, tool_cmd: Optional[str]) -> Optional[float]:
    vals = run_external(tool_cmd, reference_path, estimate_path, 1)
    return None if vals is None else vals[0]


def external_composite(estimate_path, reference_path, tool_cmd: Optional[str]) -> Optional[dict]:
    """CSIG, CBAK, COVL parsed as the last three numbers printed, in that order."""
    vals = run_external(tool_cmd, reference_path, estimate_path, 3)
    return None if vals is None else dict(zip(("csig", "cbak", "covl"), vals))


@dataclass
class ScoreReport:
    per_file: dict = field(default_factory=dict)

    @property
    def corpus_mean(self) -> dict:
        means = {}
        for name in METRIC_FIELDS:
            vals = [s[name] for s in self.per_file.values() if s.get(name) is not None]
            if vals:
                means[name] = float(np.mean(vals))
        return means

    def to_lines(self) -> list[str]:
        lines = [json.dumps({"id": fid, **scores}, sort_keys=True)
                 for fid, scores in sorted(self.per_file.items())]
        lines.append(json.dumps({"corpus_mean": self.corpus_mean,
                                 "n_files": len(self.per_file)}, sort_keys=True))
        return lines

    def write(self, path) -> None:
        Path(path).write_text("\n".join(self.to_lines()) + "\n")

    @classmethod
    def read(cls, path) -> "ScoreReport":
        per_file = {}
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            if "corpus_mean" in rec:
                continue
            fid = rec.pop("id")
            per_file[fid] = rec
        return cls(per_file)

    def summary_table(self) -> str:
        means = self.corpus_mean
        names = [n for n in METRIC_FIELDS if n in means]
        rows = [f"{'metric':<8} {'mean':>10}  (n={len(self.per_file)})"]
        rows += [f"{n:<8} {means[n]:>10.4f}" for n in names]
        return "\n".join(rows)


def score_pair(estimate, reference, sr: int = 16000) -> dict:
    est, ref = _pair(estimate, reference)
    scores = {"si_sdr": si_sdr(est, ref), "seg_snr": seg_snr(est, ref, sr)}
    try:
        scores["stoi"] = stoi(est, ref, sr)
    except InvalidInputError as exc:
        log.warning("STOI skipped: %s", exc)
    return scores


def score_directories(est_dir, ref_dir, pesq_cmd=None, composite_cmd=None) -> ScoreReport:
    from .data import ingest   # local import keeps metrics usable without the corpus code

    est_dir, ref_dir = Path(est_dir), Path(ref_dir)
    est = {p.stem: p for p in sorted(est_dir.glob("*.wav"))}
    ref = {p.stem: p for p in sorted(ref_dir.glob("*.wav"))}
    common = sorted(est.keys() & ref.keys())
    if not common:
        raise CorpusError(f"no matching file stems between {est_dir} and {ref_dir}")
    report = ScoreReport()
    for stem in common:
        e, r = ingest(est[stem]), ingest(ref[stem])
        if len(e) != len(r):
            log.warning("%s: length mismatch %d vs %d, truncating", stem, len(e), len(r))
            n = min(len(e), len(r))
            e, r = e[:n], r[:n]
        scores = score_pair(e, r)
        pesq = external_pesq(est[stem], ref[stem], pesq_cmd)
        if pesq is not None:
            scores["pesq"] = pesq
        comp = external_composite(est[stem], ref[stem], composite_cmd)
        if comp is not None:
            scores.update(comp)
        report.per_file[stem] = scores
    return report
