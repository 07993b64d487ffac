"""Stage 2: train the adversarial patch on prototypes.

The loss for a patched image ``I'`` of class ``t`` is
``P(t | I') - max_{c != t} P(c | I')``; it is averaged over random transform
draws and over the batch, and minimised with Adam starting from the prior.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import TrainingError, ValidationError
from .model_zoo import ClassifierHandle
from .patch_core import Patch, Provenance, apply_patch_batch, sample_positions, save_patch
from .transforms import TransformConfig, apply_transform, sample_transforms

log = logging.getLogger(__name__)


def probability_margin(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Per-row ``P(t) - max_{c != t} P(c)``."""
    p_t = probs.gather(1, labels[:, None])[:, 0]
    others = probs.scatter(1, labels[:, None], float("-inf"))
    return p_t - others.amax(1)


def patched_batch(images, patch_t, tops, lefts, transforms=None) -> torch.Tensor:
    out = apply_patch_batch(images, patch_t, tops, lefts)
    if transforms is not None:
        out = apply_transform(transforms, out)
    return out


def adversarial_loss(
    handle: ClassifierHandle,
    images: torch.Tensor,
    labels: torch.Tensor,
    patch,
    placements,
    transform_cfg: TransformConfig | None = None,
    rng: np.random.Generator | None = None,
) -> torch.Tensor:
    """Mean probability margin of the patched batch.

    ``placements`` is a ``(tops, lefts)`` pair with one entry per image. With a
    transform config, each image is replicated ``samples_per_step`` times and
    every copy gets its own random warp. Lies in [-1, 1].
    """
    patch_t = patch.tensor() if isinstance(patch, Patch) else patch
    if len(images) == 0:
        raise ValidationError("empty prototype batch")
    tops, lefts = (torch.as_tensor(v, dtype=torch.long) for v in placements)
    if transform_cfg is None:
        x = patched_batch(images, patch_t, tops, lefts)
        y = labels
    else:
        if rng is None:
            raise ValidationError("a transform config needs an rng")
        k = transform_cfg.samples_per_step
        rep = lambda v: v.repeat_interleave(k, dim=0)  # noqa: E731
        draws = sample_transforms(transform_cfg, rng, len(images) * k)
        x = patched_batch(rep(images), patch_t, rep(tops), rep(lefts), draws)
        y = rep(labels)
    probs = F.softmax(handle.logits(x), dim=1)
    return probability_margin(probs, y).mean()


@dataclass
class TrainRun:
    config_hash: str
    patch: Patch
    epoch_metrics: list[tuple[int, float, float]]
    seed: int
    config: dict = field(default_factory=dict)

    def save(self, directory, stem: str = "patch") -> Path:
        directory = Path(directory)
        save_patch(self.patch, directory, stem, extra={"config_hash": self.config_hash, "seed": self.seed})
        with open(directory / "metrics.jsonl", "w") as fh:
            for epoch, loss, top1 in self.epoch_metrics:
                fh.write(json.dumps({"epoch": epoch, "loss": loss, "train_top1": top1}) + "\n")
        return directory


def run_config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


def patched_top1(handle, images, labels, patch_t, policy="fixed_center", seed=0) -> float:
    rng = np.random.default_rng(seed)
    tops, lefts = sample_positions(rng, len(images), handle.input_size, tuple(patch_t.shape[-2:]), policy)
    correct = 0
    with torch.no_grad():
        for i in range(0, len(images), 256):
            sl = slice(i, i + 256)
            x = patched_batch(images[sl], patch_t, tops[sl], lefts[sl])
            correct += int((handle.logits(x).argmax(1) == labels[sl]).sum())
    return correct / max(len(images), 1)


def train_patch(
    handle: ClassifierHandle,
    images: torch.Tensor,
    labels: torch.Tensor,
    prior: Patch,
    epochs: int = 50,
    batch_size: int = 32,
    lr: float = 0.01,
    weight_decay: float = 1e-4,
    transform_cfg: TransformConfig | None = None,
    placement_policy: str = "uniform_random",
    seed: int = 0,
    patch_id: str | None = None,
    metadata: dict | None = None,
) -> TrainRun:
    """Optimise a patch initialised from ``prior`` to minimise the adversarial loss.

    ``images``/``labels`` are the training set (usually prototypes and their
    target classes). Pixels are clamped to [0, 1] after every Adam step. Each
    epoch records the mean step loss and the top-1 accuracy of the training set
    under the current patch at the centre placement.
    """
    if len(images) == 0:
        raise ValidationError("no training images")
    if len(set(labels.tolist())) < 2:
        raise ValidationError("training images must span at least two classes")
    if tuple(prior.image_size) != tuple(handle.input_size):
        raise ValidationError(f"prior built for {prior.image_size}, model expects {handle.input_size}")

    cfg = {
        "prior": prior.id,
        "epochs": epochs,
        "batch_size": batch_size,
        "lr": lr,
        "weight_decay": weight_decay,
        "transforms": None if transform_cfg is None else transform_cfg.to_dict(),
        "placement_policy": placement_policy,
        "seed": seed,
        "n_train": len(images),
        "model": handle.model_id,
    }
    chash = run_config_hash(cfg)
    rng = np.random.default_rng(seed)
    delta = prior.tensor().requires_grad_(True)
    opt = torch.optim.Adam([delta], lr=lr, weight_decay=weight_decay)
    n = len(images)
    metrics: list[tuple[int, float, float]] = []
    for epoch in range(1, epochs + 1):
        perm = rng.permutation(n)
        step_losses = []
        for i in range(0, n, batch_size):
            idx = torch.as_tensor(perm[i : i + batch_size])
            tops, lefts = sample_positions(rng, len(idx), handle.input_size, prior.shape, placement_policy)
            loss = adversarial_loss(handle, images[idx], labels[idx], delta, (tops, lefts), transform_cfg, rng)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite patch loss at epoch {epoch}", metrics)
            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                delta.clamp_(0.0, 1.0)
            step_losses.append(loss.item())
        top1 = patched_top1(handle, images, labels, delta.detach())
        metrics.append((epoch, float(np.mean(step_losses)), top1))
        log.info("patch epoch %d: L_t %.4f train top-1 %.3f", epoch, metrics[-1][1], top1)

    meta = {
        "train_config_hash": chash,
        "trained_classes": sorted(set(labels.tolist())),
        "source_model": handle.model_id,
        **(metadata or {}),
    }
    patch = Patch.from_tensor(
        delta.detach(),
        prior.image_size,
        provenance=Provenance.TRAINED if epochs > 0 else prior.provenance,
        id=patch_id or f"patch_{chash}",
        area_budget=prior.area_budget,
        metadata=meta,
    )
    return TrainRun(chash, patch, metrics, seed, cfg)
