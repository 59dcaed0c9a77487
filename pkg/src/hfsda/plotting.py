"""Report figures written next to the delimited outputs (PNG, non-interactive)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402

STYLE = {
    "figure.figsize": (5.5, 3.6),
    "figure.dpi": 120,
    "savefig.dpi": 120,
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def loss_curve(records, path) -> Path:
    """Train (and validation, when logged) loss per epoch on a log scale."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        epochs = [r["epoch"] for r in records]
        ax.plot(epochs, [r["train_loss"] for r in records], marker="o", ms=3, label="train")
        val = [(r["epoch"], r["val_loss"]) for r in records if r.get("val_loss") is not None]
        if val:
            ax.plot(*zip(*val), marker="s", ms=3, label="validation")
        ax.set_yscale("log")
        ax.xaxis.set_major_locator(MaxNLocator(integer=True))
        ax.set_xlabel("epoch")
        ax.set_ylabel("smooth-L1 loss")
        ax.legend()
        return _save(fig, path)


def score_scatter(report, path, x="si_sdr", y="stoi") -> Path:
    """One point per file; corpus means marked with dashed lines."""
    rows = [(fid, s[x], s[y]) for fid, s in sorted(report.per_file.items())
            if s.get(x) is not None and s.get(y) is not None]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        if rows:
            ids, xs, ys = zip(*rows)
            ax.scatter(xs, ys, s=14)
            if len(rows) <= 20:
                for fid, a, b in rows:
                    ax.annotate(fid, (a, b), fontsize=6, xytext=(2, 2), textcoords="offset points")
            means = report.corpus_mean
            ax.axvline(means[x], ls="--", lw=0.8, color="gray")
            ax.axhline(means[y], ls="--", lw=0.8, color="gray")
        ax.set_xlabel(x.replace("_", "-").upper() + (" (dB)" if x in ("si_sdr", "seg_snr") else ""))
        ax.set_ylabel(y.upper())
        ax.set_title(f"per-file scores (n={len(rows)})")
        return _save(fig, path)


def ablation_bars(rows, path, metric="stoi") -> Path:
    rows = [r for r in rows if r.get(metric) not in (None, "")]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.5, 3.6))
        names = [r["preset"] for r in rows]
        ax.barh(names, [float(r[metric]) for r in rows])
        ax.invert_yaxis()
        ax.set_xlabel(metric.upper())
        return _save(fig, path)
