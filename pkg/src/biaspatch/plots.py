"""Small matplotlib helpers. The Agg backend keeps output byte-stable across runs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_META = {"Software": None}


def bar_chart(labels, values, path, ylabel: str = "", title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2), dpi=100)
    ax.bar(range(len(values)), values, color="#4a7ab5")
    ax.set_xticks(range(len(labels)), labels, rotation=20, ha="right")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, metadata=_META)
    plt.close(fig)
    return Path(path)


def training_curve(epochs, losses, top1, path, title: str = "Patch training") -> Path:
    fig, ax1 = plt.subplots(figsize=(5, 3.2), dpi=100)
    ax1.plot(epochs, losses, color="#b5544a", label="loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("adversarial loss")
    ax2 = ax1.twinx()
    ax2.plot(epochs, top1, color="#4a7ab5", label="train top-1")
    ax2.set_ylabel("train top-1")
    ax1.set_title(title)
    fig.tight_layout()
    fig.savefig(path, metadata=_META)
    plt.close(fig)
    return Path(path)


def topk_bars(report: dict, path) -> Path:
    ks = ["top1", "top3", "top5"]
    adv = [report[k] for k in ks]
    ctrl = [report.get("control", {}).get(k, float("nan")) for k in ks]
    fig, ax = plt.subplots(figsize=(5, 3.2), dpi=100)
    xs = range(len(ks))
    ax.bar([x - 0.2 for x in xs], adv, width=0.4, label="adversarial patch", color="#b5544a")
    ax.bar([x + 0.2 for x in xs], ctrl, width=0.4, label="white patch", color="#bbbbbb")
    ax.set_xticks(list(xs), ks)
    ax.set_ylim(0, 1)
    ax.set_ylabel("accuracy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata=_META)
    plt.close(fig)
    return Path(path)
