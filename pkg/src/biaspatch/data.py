"""Procedural toy retail dataset.

Each image shows one "product box" lying on a noisy checkout table. A class is
the surface pattern of the box; its colour is drawn at random, so only texture
separates classes. Everything is generated from a seed; nothing is
downloaded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

# Class = surface pattern of the product box; box colour is random per item.
PATTERNS: list[str] = [
    "solid",
    "hstripe",
    "vstripe",
    "diag",
    "antidiag",
    "checker",
    "dots",
    "rings",
    "frame",
    "grid",
]

LABEL_NAMES = list(PATTERNS)


def _pattern(kind: str, h: int, w: int, period: float, phase: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if kind == "hstripe":
        return (np.sin(2 * np.pi * (yy + phase) / period) > 0).astype(np.float64)
    if kind == "vstripe":
        return (np.sin(2 * np.pi * (xx + phase) / period) > 0).astype(np.float64)
    if kind == "solid":
        return np.zeros((h, w))
    if kind == "antidiag":
        return (np.sin(2 * np.pi * (xx - yy + phase) / period) > 0).astype(np.float64)
    if kind == "grid":
        a = ((xx + phase) % period) < 1.5
        b = ((yy + phase) % period) < 1.5
        return (a | b).astype(np.float64)
    if kind == "diag":
        return (np.sin(2 * np.pi * (xx + yy + phase) / period) > 0).astype(np.float64)
    if kind == "checker":
        a = np.sin(2 * np.pi * (xx + phase) / period) > 0
        b = np.sin(2 * np.pi * (yy + phase) / period) > 0
        return (a ^ b).astype(np.float64)
    if kind == "dots":
        cy = ((yy + phase) % period) - period / 2
        cx = ((xx + phase) % period) - period / 2
        return (cy**2 + cx**2 < (period / 3.2) ** 2).astype(np.float64)
    if kind == "rings":
        r = np.sqrt((yy - h / 2) ** 2 + (xx - w / 2) ** 2)
        return (np.sin(2 * np.pi * (r + phase) / period) > 0).astype(np.float64)
    if kind == "frame":
        border = max(2, int(round(period / 2)))
        out = np.zeros((h, w))
        out[:border] = out[-border:] = 1.0
        out[:, :border] = out[:, -border:] = 1.0
        return out
    raise ValueError(f"unknown pattern {kind!r}")


def render_item(label: int, rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """Render one (size, size, 3) image of class ``label`` with values in [0, 1]."""
    kind = PATTERNS[label]
    table = rng.uniform(0.45, 0.6)
    img = np.full((size, size, 3), table) + rng.normal(0, 0.03, (1, 1, 3))
    # low-frequency table texture
    coarse = rng.normal(0, 0.05, (size // 8, size // 8, 3))
    img += np.kron(coarse, np.ones((8, 8, 1)))

    side_h = int(rng.integers(int(0.40 * size), int(0.66 * size) + 1))
    side_w = int(rng.integers(int(0.40 * size), int(0.66 * size) + 1))
    top = int(rng.integers(0, size - side_h + 1))
    left = int(rng.integers(0, size - side_w + 1))

    base = rng.uniform(0.15, 0.95, 3)
    amp = rng.uniform(0.15, 0.5)
    pat = _pattern(kind, side_h, side_w, period=rng.uniform(3.0, 5.0), phase=rng.uniform(0, 8))
    box = base[None, None, :] * (1 - amp * pat[..., None]) + amp * 0.15 * pat[..., None]
    img[top : top + side_h, left : left + side_w] = box

    img += rng.normal(0, 0.05, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


@dataclass
class ToyRetail:
    """A generated split: ``images`` is (N, 3, H, W) float32 in [0, 1]."""

    images: torch.Tensor
    labels: torch.Tensor
    name: str

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, classes) -> "ToyRetail":
        keep = torch.isin(self.labels, torch.as_tensor(sorted(classes)))
        return ToyRetail(self.images[keep], self.labels[keep], f"{self.name}[{','.join(map(str, sorted(classes)))}]")

    def take(self, n: int) -> "ToyRetail":
        return ToyRetail(self.images[:n], self.labels[:n], f"{self.name}[:{n}]")


def make_split(n: int, seed: int, size: int = 64, name: str = "split", num_classes: int = 10) -> ToyRetail:
    """Balanced split of ``n`` images (labels cycle through the classes, then shuffle)."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    imgs = np.stack([render_item(int(y), rng, size) for y in labels])
    images = torch.from_numpy(imgs).permute(0, 3, 1, 2).contiguous()
    return ToyRetail(images, torch.from_numpy(labels.astype(np.int64)), name)


def make_toy_retail(
    seed: int = 0, size: int = 64, n_train: int = 3000, n_test: int = 1000, n_val: int = 500
) -> dict[str, ToyRetail]:
    """Train, test and validation splits. Their generator seeds never coincide across splits or dataset seeds."""
    return {
        "train": make_split(n_train, seed * 3 + 1, size, "train"),
        "test": make_split(n_test, seed * 3 + 2, size, "test"),
        "val": make_split(n_val, seed * 3 + 3, size, "val"),
    }
