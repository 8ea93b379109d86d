"""Report rendering: CSV tables, aligned text, and figure files.

Every table is emitted twice, machine-readable (CSV) and human-readable
(fixed-width text), and the figure helpers render PNGs next to them.
matplotlib is imported lazily with the Agg backend so headless runs and
library users who never plot stay import-light.
"""

import csv
import io
from pathlib import Path

import numpy as np

_METRIC_COLS = ("accuracy", "precision", "recall", "f1", "auc")


def _cell(v):
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    return f"{v:.4f}"


def metrics_rows(report, class_names):
    """Per-class rows plus the macro-average row, as plain dicts."""
    rows = []
    for c, name in enumerate(class_names):
        rows.append({
            "class": name,
            "accuracy": float(report.accuracy[c]),
            "precision": float(report.precision[c]),
            "recall": float(report.recall[c]),
            "f1": float(report.f1[c]),
            "auc": float(report.auc[c]),
        })
    rows.append({"class": "average",
                 "accuracy": report.macro_accuracy,
                 "precision": report.macro_precision,
                 "recall": report.macro_recall,
                 "f1": report.macro_f1,
                 "auc": report.macro_auc})
    return rows


def metrics_csv(report, class_names):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("class",) + _METRIC_COLS)
    for row in metrics_rows(report, class_names):
        writer.writerow([row["class"]] + [_cell(row[c]) for c in _METRIC_COLS])
    writer.writerow(["top1", _cell(report.top1), "", "", "", ""])
    return buf.getvalue()


def metrics_text(report, class_names):
    width = max(len("average"), *(len(n) for n in class_names))
    head = f"{'class':<{width}}  " + "  ".join(f"{c:>9}" for c in _METRIC_COLS)
    lines = [head, "-" * len(head)]
    for row in metrics_rows(report, class_names):
        cells = "  ".join(f"{_cell(row[c]) or '-':>9}" for c in _METRIC_COLS)
        lines.append(f"{row['class']:<{width}}  {cells}")
    lines.append("-" * len(head))
    lines.append(f"{'top-1':<{width}}  {_cell(report.top1):>9}")
    return "\n".join(lines) + "\n"


def save_metrics(out_dir, report, class_names, stem="metrics"):
    out_dir = Path(out_dir)
    (out_dir / f"{stem}.csv").write_text(metrics_csv(report, class_names))
    (out_dir / f"{stem}.txt").write_text(metrics_text(report, class_names))


def verify_csv(reports):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("T", "agreement", "max_dev", "mean_dev", "samples"))
    for r in reports:
        writer.writerow([r.T, _cell(r.agreement), f"{r.max_dev:.6g}",
                         f"{r.mean_dev:.6g}", r.n])
    return buf.getvalue()


def verify_text(reports):
    head = f"{'T':>6}  {'agreement':>9}  {'max dev':>12}  {'mean dev':>12}  {'n':>5}"
    lines = [head, "-" * len(head)]
    for r in reports:
        lines.append(f"{r.T:>6}  {_cell(r.agreement):>9}  {r.max_dev:>12.6g}  "
                     f"{r.mean_dev:>12.6g}  {r.n:>5}")
    return "\n".join(lines) + "\n"


def save_verify(out_dir, reports, stem="verify"):
    out_dir = Path(out_dir)
    (out_dir / f"{stem}.csv").write_text(verify_csv(reports))
    (out_dir / f"{stem}.txt").write_text(verify_text(reports))


def history_csv(history):
    cols = ["epoch", "loss", "train_acc"]
    if history and "val_acc" in history[0]:
        cols.append("val_acc")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for entry in history:
        writer.writerow([entry["epoch"]] +
                        [f"{entry[c]:.6f}" for c in cols[1:]])
    return buf.getvalue()


# ====== figures ======

def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def save_confusion_figure(path, report, class_names):
    plt = _plt()
    k = len(class_names)
    fig, ax = plt.subplots(figsize=(1.0 + 0.6 * k, 0.8 + 0.6 * k))
    im = ax.imshow(report.confusion, cmap="Blues")
    ax.set_xticks(range(k), class_names, rotation=45, ha="right")
    ax.set_yticks(range(k), class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for i in range(k):
        for j in range(k):
            ax.text(j, i, str(report.confusion[i, j]),
                    ha="center", va="center", fontsize=8)
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_class_metric_figure(path, report, class_names):
    plt = _plt()
    k = len(class_names)
    x = np.arange(k)
    fig, ax = plt.subplots(figsize=(1.5 + 0.9 * k, 4))
    width = 0.27
    for off, col in zip((-width, 0, width), ("precision", "recall", "f1")):
        ax.bar(x + off, getattr(report, col), width, label=col)
    ax.set_xticks(x, class_names, rotation=45, ha="right")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_training_figure(path, history):
    plt = _plt()
    epochs = [h["epoch"] for h in history]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(epochs, [h["loss"] for h in history], marker="o")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax2.plot(epochs, [h["train_acc"] for h in history], marker="o",
             label="train")
    if history and "val_acc" in history[0]:
        ax2.plot(epochs, [h["val_acc"] for h in history], marker="s",
                 label="val")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("accuracy")
    ax2.set_ylim(0, 1.05)
    ax2.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_agreement_figure(path, reports):
    plt = _plt()
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ts = [r.T for r in reports]
    ax1.plot(ts, [r.agreement for r in reports], marker="o")
    ax1.set_xscale("log", base=2)
    ax1.set_xlabel("window length T")
    ax1.set_ylabel("argmax agreement")
    ax1.set_ylim(0, 1.05)
    ax2.plot(ts, [r.max_dev for r in reports], marker="o", label="max")
    ax2.plot(ts, [r.mean_dev for r in reports], marker="s", label="mean")
    ax2.set_xscale("log", base=2)
    ax2.set_yscale("log")
    ax2.set_xlabel("window length T")
    ax2.set_ylabel("logit deviation")
    ax2.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_threshold_figure(path, thresholds, class_names):
    plt = _plt()
    k = len(class_names)
    fig, ax = plt.subplots(figsize=(1.5 + 0.7 * k, 3.5))
    ax.bar(np.arange(k), np.asarray(thresholds.theta, dtype=float))
    ax.set_xticks(range(k), class_names, rotation=45, ha="right")
    ax.set_ylabel("spike-count threshold")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_count_figure(path, totals, probs, class_names):
    plt = _plt()
    k = len(class_names)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(2.5 + 1.2 * k, 3.5))
    ax1.bar(np.arange(k), np.asarray(totals, dtype=float))
    ax1.set_xticks(range(k), class_names, rotation=45, ha="right")
    ax1.set_ylabel("output spike count")
    ax2.bar(np.arange(k), np.asarray(probs, dtype=float), color="#b5651d")
    ax2.set_xticks(range(k), class_names, rotation=45, ha="right")
    ax2.set_ylabel("decoded probability")
    ax2.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_sample_grid(path, pixels, labels, class_names, per_class=4):
    """Small preview grid: one row per class, first few samples."""
    plt = _plt()
    labels = np.asarray(labels)
    k = len(class_names)
    fig, axes = plt.subplots(k, per_class,
                             figsize=(1.6 * per_class, 1.6 * k), squeeze=False)
    for c in range(k):
        idx = np.flatnonzero(labels == c)[:per_class]
        for slot in range(per_class):
            ax = axes[c][slot]
            ax.set_axis_off()
            if slot < len(idx):
                ax.imshow(np.clip(pixels[idx[slot]], 0, 1))
            if slot == 0:
                ax.set_title(class_names[c], fontsize=8, loc="left")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
