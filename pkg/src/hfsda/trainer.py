"""Optimisation loop, step-decay learning-rate schedule and ablation presets."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import checkpoint as ckpt
from .data import UtterancePair, batches, segment
from .errors import ConfigError, InvalidInputError, TrainingAborted
from .model import HFSDA, ModelConfig, training_loss
from .testkit import seed_everything

log = logging.getLogger(__name__)

ABLATION_PRESETS = (
    "full",
    "conformer_instead_of_dda",
    "conformer_plus_fa",
    "ssl_only",
    "wav2vec_encoder",
    "stft_odconv_only",
    "stft_plain_only",
)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    lr0: float = 1e-4
    decay_factor: float = 0.5
    decay_every: int = 10
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 0.0          # 0 disables clipping
    seed: int = 0
    checkpoint_dir: str = "runs/train"
    checkpoint_every: int = 10
    val_fraction: float = 0.05

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigError("train.lr0 must be > 0")
        if not 0 < self.decay_factor <= 1:
            raise ConfigError("train.decay_factor must be in (0, 1]")
        if self.decay_every < 1:
            raise ConfigError("train.decay_every must be >= 1")
        if self.epochs < 1 or self.batch_size < 1 or self.checkpoint_every < 1:
            raise ConfigError("train.epochs, train.batch_size, train.checkpoint_every must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("train.val_fraction must be in [0, 1)")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """lr0 * decay_factor ** (epoch // decay_every)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_every)


@dataclass
class TrainResult:
    checkpoint: Path
    best_checkpoint: Optional[Path]
    metrics_log: Path
    history: list = field(default_factory=list)       # per-epoch records
    step_losses: list = field(default_factory=list)
    model: Optional[HFSDA] = None


def _segments(pairs: Sequence[UtterancePair]):
    return [s for p in pairs for s in segment(p)]


def _batch_tensors(batch, dtype):
    return (torch.from_numpy(batch.noisy).to(dtype), torch.from_numpy(batch.clean).to(dtype))


@torch.no_grad()
def evaluate_loss(model: HFSDA, segments, batch_size: int) -> float:
    was_training = model.training
    model.eval()
    total, count = 0.0, 0
    for b in batches(segments, batch_size, seed=0):
        noisy, clean = _batch_tensors(b, model.dtype)
        total += training_loss(model, noisy, clean).item() * len(b.ids)
        count += len(b.ids)
    model.train(was_training)
    return total / count


def _dump_batch(directory: Path, batch, epoch: int, step: int) -> Path:
    path = directory / f"nonfinite_epoch{epoch:04d}_step{step:06d}.npz"
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, noisy=batch.noisy, clean=batch.clean, ids=np.array(batch.ids))
    return path


def train(model_cfg: ModelConfig, cfg: TrainConfig, train_pairs: Sequence[UtterancePair],
          val_pairs: Sequence[UtterancePair] = (), resume_from=None,
          on_step: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Train from scratch (or resume) and write checkpoints + a JSONL metrics log.

    Checkpoints ``epoch_XXXX.ckpt`` every ``checkpoint_every`` epochs and at
    the last epoch; ``best.ckpt`` whenever validation loss (training loss
    when there is no validation set) improves.
    """
    if not train_pairs:
        raise ConfigError("training corpus is empty")
    out_dir = Path(cfg.checkpoint_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "metrics.jsonl"

    seed_everything(cfg.seed)
    model = HFSDA(model_cfg)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=lr_at(0, cfg), betas=(cfg.adam_beta1, cfg.adam_beta2),
                           eps=cfg.adam_eps)
    start_epoch, step, best = 0, 0, math.inf
    if resume_from is not None:
        state = ckpt.load_checkpoint(resume_from, model_cfg)
        ckpt.restore_model(model, state)
        ckpt.restore_optimizer(model, opt, state)
        ckpt.restore_rng(state)
        start_epoch = state.epoch
        step = int(state.header["meta"].get("step", 0))
        best = float(state.header["meta"].get("best", math.inf))
        log.info("resumed from %s at epoch %d", resume_from, start_epoch)
    elif log_path.exists():
        log_path.unlink()

    train_segs, val_segs = _segments(train_pairs), _segments(val_pairs)
    if not train_segs:
        raise ConfigError("no training segments (all utterances shorter than the tail threshold)")
    result = TrainResult(checkpoint=out_dir / "last.ckpt", best_checkpoint=None,
                         metrics_log=log_path, model=model)

    def save(path, epoch):
        tensors = {**ckpt.model_tensors(model), **ckpt.optimizer_tensors(model, opt),
                   **ckpt.rng_tensors()}
        meta = {"step": step, "best": best, "lr": lr_at(epoch, cfg)}
        return ckpt.save_checkpoint(path, tensors, epoch, model_cfg, meta)

    t0 = time.monotonic()
    model.train()
    for epoch in range(start_epoch, cfg.epochs):
        lr = lr_at(epoch, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        total, count = 0.0, 0
        for batch in batches(train_segs, cfg.batch_size, cfg.seed, epoch):
            noisy, clean = _batch_tensors(batch, model.dtype)
            try:
                loss = training_loss(model, noisy, clean)
                cause = None if torch.isfinite(loss) else "non-finite loss"
            except InvalidInputError as exc:
                # overflow inside the network surfaces as a non-finite activation
                cause = f"non-finite activation ({exc})"
            if cause is not None:
                dump = _dump_batch(out_dir, batch, epoch, step)
                raise TrainingAborted(
                    f"{cause} at epoch {epoch} step {step} (batch {batch.ids}); "
                    f"batch saved to {dump}", batch_id=batch.ids, dump_path=dump)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            value = loss.item()
            result.step_losses.append(value)
            if on_step is not None:
                on_step(step, value)
            step += 1
            total += value * len(batch.ids)
            count += len(batch.ids)

        train_loss = total / count
        val_loss = evaluate_loss(model, val_segs, cfg.batch_size) if val_segs else None
        record = {"epoch": epoch + 1, "lr": lr, "train_loss": train_loss,
                  "val_loss": val_loss, "wall_time": round(time.monotonic() - t0, 3)}
        result.history.append(record)
        with open(log_path, "a") as fh:
            fh.write(json.dumps(record) + "\n")
        log.info("epoch %d lr %.3g train %.5f val %s", epoch + 1, lr, train_loss,
                 "-" if val_loss is None else f"{val_loss:.5f}")

        done = epoch + 1
        score = val_loss if val_loss is not None else train_loss
        if score < best:
            best = score
            result.best_checkpoint = save(out_dir / "best.ckpt", done)
        if done % cfg.checkpoint_every == 0 or done == cfg.epochs:
            path = save(out_dir / f"epoch_{done:04d}.ckpt", done)
            save(out_dir / "last.ckpt", done)
            result.checkpoint = path
    return result


def load_model(path, model_cfg: Optional[ModelConfig] = None) -> HFSDA:
    """Rebuild a model from a checkpoint (config taken from its header if not given)."""
    if model_cfg is None:
        model_cfg = ModelConfig.from_dict(ckpt.read_header(path)["model_cfg"])
    state = ckpt.load_checkpoint(path, model_cfg)
    model = HFSDA(model_cfg)
    ckpt.restore_model(model, state)
    model.eval()
    return model


def build_ablation(preset: str, base: ModelConfig, wav2vec_identifier: str = "") -> ModelConfig:
    """Model configuration for one row of the module ablation."""
    if preset == "full":
        return base
    if preset == "conformer_instead_of_dda":
        return replace(base, block="conformer", conv_kernel=31)
    if preset == "conformer_plus_fa":
        return replace(base, block="conformer_fa", conv_kernel=31)
    if preset == "ssl_only":
        return replace(base, use_spectral=False, use_ssl=True)
    if preset == "wav2vec_encoder":
        ssl = replace(base.ssl, family="wav2vec2")
        if base.ssl.kind == "external_pretrained":
            if not wav2vec_identifier:
                raise ConfigError("wav2vec_encoder preset needs ssl.wav2vec_identifier "
                                  "when an external encoder is configured")
            ssl = replace(ssl, identifier=wav2vec_identifier)
        return replace(base, ssl=ssl, use_ssl=True)
    if preset == "stft_odconv_only":
        return replace(base, use_ssl=False, use_spectral=True,
                       odconv=replace(base.odconv, enabled=True))
    if preset == "stft_plain_only":
        return replace(base, use_ssl=False, use_spectral=True,
                       odconv=replace(base.odconv, enabled=False))
    raise ConfigError(f"unknown ablation preset {preset!r}; valid: {', '.join(ABLATION_PRESETS)}")
