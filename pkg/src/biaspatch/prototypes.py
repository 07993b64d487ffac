"""Class prototypes by multi-class margin maximisation.

A prototype of class ``t`` is an image whose logit for ``t`` beats every other
logit by ``margin``. Optimisation starts from mid-grey noise and runs Adam in
pixel space, clamping to the RGB cube after each step.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import PrototypeRejectedError, SetGenerationError, ValidationError
from .model_zoo import ClassifierHandle

log = logging.getLogger(__name__)


def margin_loss(logits: torch.Tensor, t, margin: float = 10.0, p: int = 1) -> torch.Tensor:
    """``(1/C) * sum_{c != t} max(0, margin - S_t + S_c) ** p``.

    ``logits`` is ``(C,)`` with an int ``t`` or ``(N, C)`` with ``t`` of shape
    ``(N,)``, in which case one loss per row is returned. The divisor is the
    total class count ``C``, not ``C - 1``.
    """
    s = torch.as_tensor(logits)
    single = s.dim() == 1
    if single:
        s = s[None]
    C = s.shape[-1]
    if C < 2:
        raise ValidationError("margin loss needs at least two classes")
    if margin <= 0:
        raise ValidationError("margin must be positive")
    if p not in (1, 2):
        raise ValidationError("p must be 1 or 2")
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    if (t < 0).any() or (t >= C).any():
        raise ValidationError(f"target class out of range [0, {C})")
    if len(t) == 1 and s.shape[0] > 1:
        t = t.expand(s.shape[0])
    s_t = s.gather(1, t[:, None])
    hinge = (margin - s_t + s).clamp_min(0.0) ** p
    others = torch.ones_like(hinge, dtype=torch.bool).scatter(1, t[:, None], False)
    loss = (hinge * others).sum(1) / C
    return loss[0] if single else loss


@dataclass
class Prototype:
    pixels: torch.Tensor  # (3, H, W)
    target_class: int
    final_margin_loss: float
    steps_used: int
    seed: int
    confidence: float = float("nan")


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def init_noise(seed: int, image_size, low: float = 0.4, high: float = 0.6) -> torch.Tensor:
    gen = torch.Generator().manual_seed(int(seed))
    H, W = image_size
    return low + (high - low) * torch.rand(3, H, W, generator=gen)


def optimize_prototypes(
    handle: ClassifierHandle,
    targets,
    seeds,
    margin: float = 10.0,
    p: int = 1,
    steps: int = 500,
    lr: float = 0.05,
):
    """Optimise a batch of independent prototypes.

    Every image has its own loss and Adam moments are per-pixel, so batching does
    not couple them. An image stops changing once its loss reaches zero.
    Returns ``(pixels, final_losses, steps_used)``.
    """
    targets = torch.as_tensor(targets, dtype=torch.long)
    x = torch.stack([init_noise(s, handle.input_size) for s in seeds]).requires_grad_(True)
    opt = torch.optim.Adam([x], lr=lr)
    n = len(targets)
    done = torch.zeros(n, dtype=torch.bool)
    steps_used = torch.zeros(n, dtype=torch.long)
    losses = torch.full((n,), float("inf"))
    for step in range(steps + 1):
        loss = margin_loss(handle.logits(x), targets, margin, p)
        losses = torch.where(done, losses, loss.detach())
        done = done | (loss.detach() <= 0)
        if done.all() or step == steps:
            break
        steps_used += (~done).long()
        frozen = x.detach()[done].clone()
        opt.zero_grad()
        loss[~done].sum().backward()
        opt.step()
        with torch.no_grad():
            x.clamp_(0.0, 1.0)
            x[done] = frozen
    return x.detach(), losses, steps_used


def _accept(handle, pixels, t, loss, steps, seed) -> Prototype:
    label, probs = handle.predict(pixels)
    if label != t:
        raise PrototypeRejectedError(t, float(loss), label)
    return Prototype(pixels.clone(), int(t), float(loss), int(steps), int(seed), float(probs[t]))


def generate_prototype(
    handle: ClassifierHandle,
    t: int,
    margin: float = 10.0,
    p: int = 1,
    steps: int = 500,
    lr: float = 0.05,
    seed: int = 0,
) -> Prototype:
    """One prototype for class ``t``; raises :class:`PrototypeRejectedError` if top-1 is not ``t``."""
    if not 0 <= t < handle.num_classes:
        raise ValidationError(f"class {t} outside [0, {handle.num_classes})")
    pixels, losses, used = optimize_prototypes(handle, [t], [seed], margin, p, steps, lr)
    return _accept(handle, pixels[0], t, losses[0], used[0], seed)


@dataclass
class PrototypeSet:
    prototypes: list[Prototype]
    shortage: dict[int, int]
    per_class: int
    attempts: int = 0  # generations run, retries included

    def __len__(self) -> int:
        return len(self.prototypes)

    def __iter__(self):
        return iter(self.prototypes)

    @property
    def images(self) -> torch.Tensor:
        return torch.stack([pr.pixels for pr in self.prototypes])

    @property
    def labels(self) -> torch.Tensor:
        return torch.tensor([pr.target_class for pr in self.prototypes], dtype=torch.long)

    def restrict(self, classes) -> "PrototypeSet":
        keep = set(int(c) for c in classes)
        return PrototypeSet(
            [pr for pr in self.prototypes if pr.target_class in keep],
            {t: n for t, n in self.shortage.items() if t in keep},
            self.per_class,
        )

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        entries = []
        for pr in self.prototypes:
            name = f"class{pr.target_class:03d}_seed{pr.seed}.png"
            arr = pr.pixels.permute(1, 2, 0).numpy()
            Image.fromarray(np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)).save(directory / name)
            entries.append(
                {
                    "file": name,
                    "class": pr.target_class,
                    "seed": pr.seed,
                    "final_loss": pr.final_margin_loss,
                    "steps": pr.steps_used,
                    "confidence": pr.confidence,
                }
            )
        np.save(directory / "prototypes.npy", self.images.numpy())
        manifest = {"per_class": self.per_class, "attempts": self.attempts, "shortage": {str(k): v for k, v in self.shortage.items()}, "items": entries}
        path = directory / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, directory) -> "PrototypeSet":
        directory = Path(directory)
        meta = json.loads((directory / "manifest.json").read_text())
        images = torch.from_numpy(np.load(directory / "prototypes.npy"))
        protos = [
            Prototype(images[i], e["class"], e["final_loss"], e["steps"], e["seed"], e.get("confidence", float("nan")))
            for i, e in enumerate(meta["items"])
        ]
        return cls(protos, {int(k): v for k, v in meta["shortage"].items()}, meta["per_class"], meta.get("attempts", 0))


def generate_prototype_set(
    handle: ClassifierHandle,
    per_class: int = 15,
    seed: int = 0,
    classes=None,
    margin: float = 10.0,
    p: int = 1,
    steps: int = 500,
    lr: float = 0.05,
    retries: int = 5,
) -> PrototypeSet:
    """``per_class`` prototypes for each class, each from its own derived seed.

    Rejected prototypes are retried with fresh seeds up to ``retries`` times;
    whatever is still missing is reported in ``shortage``. A class with no
    prototype at all raises :class:`SetGenerationError`.
    """
    if per_class < 1:
        raise ValidationError("per_class must be >= 1")
    classes = list(range(handle.num_classes)) if classes is None else sorted(int(c) for c in classes)
    slots = [(t, j) for t in classes for j in range(per_class)]
    accepted: dict[tuple[int, int], Prototype] = {}
    pending = slots
    attempts = 0
    for attempt in range(retries + 1):
        if not pending:
            break
        attempts += len(pending)
        targets = [t for t, _ in pending]
        seeds = [derive_seed(seed, t, j, attempt) for t, j in pending]
        pixels, losses, used = optimize_prototypes(handle, targets, seeds, margin, p, steps, lr)
        still = []
        for k, (t, j) in enumerate(pending):
            try:
                accepted[(t, j)] = _accept(handle, pixels[k], t, losses[k], used[k], seeds[k])
            except PrototypeRejectedError as exc:
                log.info("%s (attempt %d)", exc, attempt)
                still.append((t, j))
        pending = still

    shortage: dict[int, int] = {}
    for t, _ in pending:
        shortage[t] = shortage.get(t, 0) + 1
    empty = [t for t in classes if shortage.get(t, 0) == per_class]
    if empty:
        raise SetGenerationError(empty)
    protos = [accepted[s] for s in slots if s in accepted]
    return PrototypeSet(protos, shortage, per_class, attempts)
