"""Versioned binary checkpoint container.

Byte layout (all integers little-endian)::

    offset  size      field
    0       8         magic b"HFSDACKP"
    8       4  u32    format_version (currently 1)
    12      4  u32    header_len H
    16      H         header, UTF-8 JSON object with at least
                      format_version, model_cfg_hash, epoch, model_cfg, dtypes
    16+H    4  u32    tensor_count N
    ...               N tensor records:
                        2  u16   name_len
                        *        name (UTF-8)
                        1  u8    ndim
                        8*ndim   u64 dims
                        8*prod   float64 values, C order
    end-32  32        SHA-256 of every preceding byte

Every tensor is widened to float64 on disk; ``header["dtypes"]`` records
the original dtype so loading narrows it back (float32 round trips are
exact).  Writes go to a temporary file that is then renamed into place.
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .errors import CorruptCheckpointError, IncompatibleCheckpointError

MAGIC = b"HFSDACKP"
FORMAT_VERSION = 1
_DIGEST_LEN = 32


@dataclass
class CheckpointState:
    header: dict
    tensors: dict           # name -> np.ndarray (float64)

    @property
    def epoch(self) -> int:
        return self.header["epoch"]

    def tensor(self, name: str) -> torch.Tensor:
        dtype = getattr(torch, self.header["dtypes"][name])
        return torch.from_numpy(self.tensors[name].copy()).to(dtype)


def _dtype_name(t: torch.Tensor) -> str:
    return str(t.dtype).replace("torch.", "")


def save_checkpoint(path, tensors: dict, epoch: int, model_cfg, meta: Optional[dict] = None) -> Path:
    """Write ``tensors`` (name -> torch.Tensor) plus a header; returns the path."""
    header = {
        "format_version": FORMAT_VERSION,
        "model_cfg_hash": model_cfg.digest(),
        "epoch": int(epoch),
        "model_cfg": model_cfg.to_dict(),
        "dtypes": {n: _dtype_name(t) for n, t in tensors.items()},
        "meta": meta or {},
    }
    hdr = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(hdr)))
    buf.write(hdr)
    buf.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        arr = t.detach().cpu().to(torch.float64).contiguous().numpy()
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.astype("<f8", copy=False).tobytes())
    body = buf.getvalue()
    data = body + hashlib.sha256(body).digest()

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".ckpt")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptCheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_header(path) -> dict:
    """Parse only the header (no digest check, no tensors)."""
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 16 or head[:8] != MAGIC:
            raise CorruptCheckpointError(f"{path} is not a checkpoint file")
        _, hlen = struct.unpack("<II", head[8:16])
        raw = fh.read(hlen)
    if len(raw) < hlen:
        raise CorruptCheckpointError("checkpoint is truncated")
    return json.loads(raw)


def load_checkpoint(path, expected_cfg=None) -> CheckpointState:
    """Read and verify a checkpoint.

    Raises CorruptCheckpointError for truncated or altered bytes and
    IncompatibleCheckpointError when the format version or the model
    configuration hash does not match ``expected_cfg``.
    """
    data = Path(path).read_bytes()
    if len(data) < 16 + _DIGEST_LEN or data[:8] != MAGIC:
        raise CorruptCheckpointError(f"{path} is not a checkpoint file or is truncated")
    version = struct.unpack("<I", data[8:12])[0]
    if version != FORMAT_VERSION:
        raise IncompatibleCheckpointError(
            f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    body, digest = data[:-_DIGEST_LEN], data[-_DIGEST_LEN:]
    r = _Reader(body)
    r.take(12)
    (hlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(hlen))
    except ValueError as exc:
        raise CorruptCheckpointError(f"unreadable checkpoint header: {exc}") from exc
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(body) or hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpointError("checkpoint digest mismatch (file truncated or altered)")

    if expected_cfg is not None and expected_cfg.digest() != header["model_cfg_hash"]:
        raise IncompatibleCheckpointError(
            "checkpoint was written for a different model configuration "
            f"(hash {header['model_cfg_hash'][:12]}, expected {expected_cfg.digest()[:12]})")
    return CheckpointState(header, tensors)


# ---- helpers binding the container to torch modules/optimizers ----

def model_tensors(model) -> dict:
    """Trainable state of ``model``; the frozen SSL encoder is rebuilt, not stored."""
    return {f"model/{k}": v for k, v in model.state_dict().items()
            if not k.startswith("ssl.encoder.")}


def optimizer_tensors(model, optimizer) -> dict:
    names = {id(p): n for n, p in model.named_parameters()}
    out = {}
    for p, st in optimizer.state.items():
        for key, val in st.items():
            if torch.is_tensor(val):
                out[f"optim/{names[id(p)]}/{key}"] = val
    return out


def rng_tensors() -> dict:
    return {"rng/torch": torch.get_rng_state()}


def restore_model(model, state: CheckpointState) -> None:
    sd = {k[len("model/"):]: state.tensor(k) for k in state.tensors if k.startswith("model/")}
    try:
        missing, unexpected = model.load_state_dict(sd, strict=False)
    except RuntimeError as exc:        # shape mismatches
        raise IncompatibleCheckpointError(str(exc)) from exc
    missing = [k for k in missing if not k.startswith("ssl.encoder.")]
    if missing or unexpected:
        raise IncompatibleCheckpointError(
            f"state mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")


def restore_optimizer(model, optimizer, state: CheckpointState) -> None:
    params = dict(model.named_parameters())
    for key in state.tensors:
        if not key.startswith("optim/"):
            continue
        pname, field = key[len("optim/"):].rsplit("/", 1)
        optimizer.state[params[pname]][field] = state.tensor(key)


def restore_rng(state: CheckpointState) -> None:
    if "rng/torch" in state.tensors:
        torch.set_rng_state(state.tensor("rng/torch"))
