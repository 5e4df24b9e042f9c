"""Delimited tables and matplotlib figures for training and evaluation runs."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .harness import EpochLog, EvalReport  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "figure.dpi": 120,
    "savefig.bbox": "tight",
}

LOG_COLUMNS = ("epoch", "steps", "train_loss", "val_p10", "seconds")


def write_training_log(history: Sequence[EpochLog], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for e in history:
            w.writerow([e.epoch, e.steps, f"{e.train_loss:.10g}", f"{e.val_p10:.10g}", f"{e.seconds:.3f}"])


def write_eval_table(reports: Mapping[str, EvalReport], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(("model", "metric", "value"))
        for name, rep in reports.items():
            for metric, value in rep.rows():
                w.writerow((name, metric, value))


def plot_training(history: Sequence[EpochLog], path) -> Path:
    epochs = [e.epoch for e in history]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        ax.plot(epochs, [e.train_loss for e in history], color="C0", marker="o", ms=3, label="train loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("train loss")
        val = [e.val_p10 for e in history]
        if any(v == v for v in val):
            ax2 = ax.twinx()
            ax2.plot(epochs, val, color="C1", marker="s", ms=3, label="val precision@10")
            ax2.set_ylabel("val precision@10")
            ax2.set_ylim(0, 1)
            ax2.spines["right"].set_visible(True)
            fig.legend(loc="upper center", ncol=2)
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_precision(reports: Mapping[str, EvalReport], path) -> Path:
    names = list(reports)
    ks = sorted(next(iter(reports.values())).precision)
    width = 0.8 / max(len(names), 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        for i, name in enumerate(names):
            xs = [j + i * width for j in range(len(ks))]
            ax.bar(xs, [reports[name].precision[k] for k in ks], width=width, label=name)
        ax.set_xticks([j + width * (len(names) - 1) / 2 for j in range(len(ks))])
        ax.set_xticklabels([f"@{k}" for k in ks])
        ax.set_ylabel("precision")
        ax.set_ylim(0, 1)
        ax.legend()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def write_training_report(history: Sequence[EpochLog], out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_training_log(history, out / "training_log.tsv")
    return [out / "training_log.tsv", plot_training(history, out / "training_curve.png")]


def write_eval_report(reports: Mapping[str, EvalReport], out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_eval_table(reports, out / "eval.tsv")
    return [out / "eval.tsv", plot_precision(reports, out / "precision_at_k.png")]
