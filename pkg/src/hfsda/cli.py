"""Batch command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import checkpoint as ckpt
from .config import RunConfig, model_config_from, resolve
from .data import ingest, load_pairs, scan_corpus, split_validation, write_wav
from .errors import (CheckpointError, ConfigError, CorpusError, EncoderUnavailableError,
                     FormatError, HfsdaError, TrainingAborted)
from .metrics import score_directories
from .model import HFSDA, ModelConfig, describe_architecture, enhance_file
from .testkit import make_mini_corpus
from .trainer import ABLATION_PRESETS, build_ablation, train

log = logging.getLogger("hfsda")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

SUMMARY_FIELDS = ["preset", "params", "trainable_params", "final_train_loss",
                  "stoi", "si_sdr", "seg_snr", "pesq", "csig", "cbak", "covl", "checkpoint"]


class UsageError(HfsdaError):
    pass


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="PATH", help="INI config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="K=V",
                   help="override a config key (repeatable)")
    p.add_argument("--profile", choices=["smoke", "full"], default="full")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = argparse.ArgumentParser(prog="hfsda", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("train", parents=[common], help="train a model")

    p = sub.add_parser("enhance", parents=[common], help="enhance a directory of WAV files")
    p.add_argument("checkpoint")
    p.add_argument("in_dir")
    p.add_argument("out_dir")

    p = sub.add_parser("evaluate", parents=[common], help="score estimates against references")
    p.add_argument("est_dir")
    p.add_argument("ref_dir")
    p.add_argument("report_path")
    p.add_argument("--plot", action="store_true", help="write PNG figures next to the report")
    p.add_argument("--train-log", metavar="PATH", help="metrics.jsonl for the loss-curve figure")

    p = sub.add_parser("ablate", parents=[common], help="smoke train+evaluate one ablation preset")
    p.add_argument("preset")

    p = sub.add_parser("inspect-checkpoint", parents=[common], help="print checkpoint header")
    p.add_argument("checkpoint")
    return parser


def _setup_logging(verbose: bool, log_file=None):
    root = logging.getLogger()
    for h in list(root.handlers):
        if getattr(h, "_hfsda", False):
            root.removeHandler(h)
            h.close()
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    handlers = [logging.StreamHandler(sys.stderr)]
    if log_file is not None:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, mode="a"))
    for h in handlers:
        h._hfsda = True
        h.setFormatter(fmt)
        root.addHandler(h)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def _resolve(args) -> RunConfig:
    return resolve(args.config, args.overrides, args.profile, args.seed)


def _require_dir(key: str, value: str) -> Path:
    if not value:
        raise UsageError(f"{key} is not set")
    path = Path(value)
    if not path.is_dir():
        raise UsageError(f"{key} does not exist: {path}")
    return path


def _corpus_dirs(cfg: RunConfig):
    """(train noisy, train clean, test noisy, test clean); the smoke profile
    generates the synthetic mini-corpus when no corpus is configured."""
    noisy, clean = cfg.get("data.noisy_dir"), cfg.get("data.clean_dir")
    if cfg.profile == "smoke" and not noisy and not clean:
        root = Path(cfg.train.checkpoint_dir) / "mini_corpus"
        if not (root / "manifest.json").exists():
            make_mini_corpus(root, seed=cfg.get("data.seed"))
        noisy, clean = str(root / "noisy"), str(root / "clean")
    n = _require_dir("data.noisy_dir", noisy)
    c = _require_dir("data.clean_dir", clean)
    tn, tc = cfg.get("data.test_noisy_dir"), cfg.get("data.test_clean_dir")
    tn = _require_dir("data.test_noisy_dir", tn) if tn else n
    tc = _require_dir("data.test_clean_dir", tc) if tc else c
    return n, c, tn, tc


def _preflight_dirs(cfg: RunConfig):
    """Fail before any side effect when configured corpus directories are missing."""
    for key in ("data.noisy_dir", "data.clean_dir", "data.test_noisy_dir", "data.test_clean_dir"):
        if cfg.get(key):
            _require_dir(key, cfg.get(key))
    if cfg.profile != "smoke":
        for key in ("data.noisy_dir", "data.clean_dir"):
            _require_dir(key, cfg.get(key))


def _run_training(cfg: RunConfig, model_cfg: ModelConfig, out_dir: Path):
    from dataclasses import replace

    noisy, clean, _, _ = _corpus_dirs(cfg)
    pairs = scan_corpus(noisy, clean)
    train_p, val_p = split_validation(pairs, cfg.train.val_fraction, cfg.get("data.seed"))
    log.info("corpus: %d training pairs, %d validation pairs", len(train_p), len(val_p))
    workers = cfg.get("data.workers")
    train_cfg = replace(cfg.train, checkpoint_dir=str(out_dir))
    return train(model_cfg, train_cfg, load_pairs(train_p, workers), load_pairs(val_p, workers))


def cmd_train(args) -> int:
    cfg = _resolve(args)
    _preflight_dirs(cfg)
    out_dir = Path(cfg.train.checkpoint_dir)
    _setup_logging(args.verbose, out_dir / "run.log")
    cfg.write_resolved(out_dir / "resolved_config.json")
    result = _run_training(cfg, cfg.model, out_dir)
    print(result.checkpoint)
    return EXIT_OK


def _model_for_checkpoint(cfg: RunConfig, path) -> HFSDA:
    from .trainer import load_model

    header = ckpt.read_header(path)
    model_cfg = ModelConfig.from_dict(header["model_cfg"])
    overrides = cfg.model_overrides()
    if overrides:
        model_cfg = model_config_from(overrides, base=model_cfg)
    return load_model(path, model_cfg)


def cmd_enhance(args) -> int:
    cfg = _resolve(args)
    in_dir = _require_dir("in_dir", args.in_dir)
    model = _model_for_checkpoint(cfg, args.checkpoint)
    files = sorted(p for p in in_dir.iterdir() if p.suffix.lower() == ".wav")
    if not files:
        log.warning("no WAV files in %s; nothing to do", in_dir)
        return EXIT_OK
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved(out_dir / "resolved_config.json")
    for path in files:
        write_wav(out_dir / path.name, enhance_file(model, ingest(path)), model.cfg.stft.sample_rate_hz)
        log.info("enhanced %s", path.name)
    return EXIT_OK


def _evaluate(cfg: RunConfig, est_dir, ref_dir, report_path, plot=False, train_log=None):
    report = score_directories(est_dir, ref_dir, cfg.pesq_cmd, cfg.composite_cmd)
    report_path = Path(report_path)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report.write(report_path)
    table = report.summary_table()
    report_path.with_suffix(".summary.txt").write_text(table + "\n")
    print(table)
    if plot:
        from . import plotting

        plotting.score_scatter(report, report_path.with_suffix(".scores.png"))
        if train_log:
            records = [json.loads(line) for line in Path(train_log).read_text().splitlines() if line]
            plotting.loss_curve(records, report_path.with_suffix(".loss.png"))
        else:
            log.warning("--plot without --train-log: loss curve skipped")
    return report


def cmd_evaluate(args) -> int:
    cfg = _resolve(args)
    est = _require_dir("est_dir", args.est_dir)
    ref = _require_dir("ref_dir", args.ref_dir)
    if args.train_log and not Path(args.train_log).is_file():
        raise UsageError(f"--train-log file not found: {args.train_log}")
    report_path = Path(args.report_path)
    _evaluate(cfg, est, ref, report_path, args.plot, args.train_log)
    cfg.write_resolved(report_path.with_suffix(".config.json"))
    return EXIT_OK


def _append_summary(path: Path, row: dict) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, SUMMARY_FIELDS, delimiter="\t", extrasaction="ignore")
        if new:
            writer.writeheader()
        writer.writerow({k: ("" if row.get(k) is None else row[k]) for k in SUMMARY_FIELDS})


def read_summary(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


def cmd_ablate(args) -> int:
    if args.preset not in ABLATION_PRESETS:
        raise UsageError(f"unknown preset {args.preset!r}; valid presets: {', '.join(ABLATION_PRESETS)}")
    args.profile = "smoke"
    cfg = _resolve(args)
    _preflight_dirs(cfg)
    model_cfg = build_ablation(args.preset, cfg.model, cfg.get("ssl.wav2vec_identifier"))
    base_dir = Path(cfg.train.checkpoint_dir)
    run_dir = base_dir / "ablate" / args.preset
    _setup_logging(args.verbose, run_dir / "run.log")
    cfg.write_resolved(run_dir / "resolved_config.json")

    probe = HFSDA(model_cfg)
    audit = describe_architecture(probe)
    (run_dir / "architecture.txt").write_text("\n".join(audit) + "\n")
    log.info("preset %s parameter audit:\n%s", args.preset, "\n".join(audit))
    n_params = sum(p.numel() for p in probe.parameters())
    n_train = sum(p.numel() for p in probe.parameters() if p.requires_grad)
    del probe

    result = _run_training(cfg, model_cfg, run_dir)
    _, _, test_noisy, test_clean = _corpus_dirs(cfg)
    enhanced = run_dir / "enhanced"
    enhanced.mkdir(exist_ok=True)
    model = result.model
    for path in sorted(test_noisy.glob("*.wav")):
        write_wav(enhanced / path.name, enhance_file(model, ingest(path)))
    report = _evaluate(cfg, enhanced, test_clean, run_dir / "report.jsonl",
                       plot=True, train_log=result.metrics_log)
    row = {"preset": args.preset, "params": n_params, "trainable_params": n_train,
           "final_train_loss": result.history[-1]["train_loss"],
           "checkpoint": str(result.checkpoint), **report.corpus_mean}
    summary = base_dir / "ablation_summary.tsv"
    _append_summary(summary, row)
    from . import plotting

    plotting.ablation_bars(read_summary(summary), base_dir / "ablation_summary.png")
    print(json.dumps(row, sort_keys=True))
    return EXIT_OK


def cmd_inspect(args) -> int:
    state = ckpt.load_checkpoint(args.checkpoint)
    hdr = state.header
    print(json.dumps({k: hdr[k] for k in ("format_version", "model_cfg_hash", "epoch", "meta")},
                     indent=1, sort_keys=True))
    print(json.dumps(hdr["model_cfg"], indent=1, sort_keys=True))
    for name, arr in state.tensors.items():
        print(f"{name}\t{hdr['dtypes'][name]}\t{list(arr.shape)}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "enhance": cmd_enhance, "evaluate": cmd_evaluate,
            "ablate": cmd_ablate, "inspect-checkpoint": cmd_inspect}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    _setup_logging(args.verbose)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError, CorpusError, CheckpointError, FormatError,
            EncoderUnavailableError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (HfsdaError, OSError, RuntimeError, ValueError) as exc:
        log.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
