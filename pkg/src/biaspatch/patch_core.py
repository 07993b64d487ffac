"""Patches, placements and the patch-application operator.

``apply_patch`` computes ``(1 - M) * x + M * delta`` where ``delta`` is the patch
pasted onto a zero canvas and ``M`` the binary location mask. It is the only
place a patch enters an image.
"""

from __future__ import annotations

import enum
import json
import os
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import PlacementError, ValidationError

# 32x32 on 512x512, quoted as "0.38%" but exactly 0.390625%
DEFAULT_AREA_BUDGET = 32 * 32 / (512 * 512)


class Provenance(str, enum.Enum):
    WHITE = "white"
    GAUSSIAN = "gaussian"
    HARD_EXAMPLE = "hard_example"
    FUSED_PRIOR = "fused_prior"
    TRAINED = "trained"


@dataclass
class Patch:
    """An RGB patch ``pixels`` of shape ``(h, w, 3)`` for images of ``image_size``.

    Construction fails if pixels leave [0, 1] or if the patch exceeds
    ``area_budget`` of the image area. Nothing is clamped silently.
    """

    pixels: np.ndarray
    image_size: tuple[int, int]
    provenance: Provenance = Provenance.TRAINED
    id: str = field(default_factory=lambda: uuid.uuid4().hex[:12])
    area_budget: float = DEFAULT_AREA_BUDGET
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[-1] != 3:
            raise ValidationError(f"patch pixels must be (h, w, 3), got {px.shape}")
        if not np.isfinite(px).all():
            raise ValidationError("patch contains non-finite values")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValidationError(f"patch pixels outside [0, 1]: [{px.min()}, {px.max()}]")
        self.image_size = tuple(int(s) for s in self.image_size)
        H, W = self.image_size
        h, w = px.shape[:2]
        if h * w > self.area_budget * H * W + 1e-9:
            raise ValidationError(
                f"patch {h}x{w} covers {h * w / (H * W):.4%} of a {H}x{W} image, "
                f"budget is {self.area_budget:.4%}"
            )
        self.pixels = px
        self.provenance = Provenance(self.provenance)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]

    def tensor(self) -> torch.Tensor:
        """``(3, h, w)`` float tensor copy of the pixels."""
        return torch.from_numpy(self.pixels.transpose(2, 0, 1).copy())

    @classmethod
    def from_tensor(cls, t: torch.Tensor, image_size, **kw) -> "Patch":
        return cls(t.detach().cpu().permute(1, 2, 0).numpy().copy(), image_size, **kw)

    @classmethod
    def white(cls, size, image_size, **kw) -> "Patch":
        h, w = _pair(size)
        kw.setdefault("id", f"white_{h}x{w}")
        return cls(np.ones((h, w, 3), np.float32), image_size, Provenance.WHITE, **kw)

    @classmethod
    def gaussian(cls, size, image_size, seed: int = 0, mean: float = 0.5, std: float = 0.2, **kw) -> "Patch":
        h, w = _pair(size)
        rng = np.random.default_rng(seed)
        px = np.clip(rng.normal(mean, std, (h, w, 3)), 0, 1).astype(np.float32)
        kw.setdefault("id", f"gaussian_{h}x{w}_s{seed}")
        return cls(px, image_size, Provenance.GAUSSIAN, **kw)


def _pair(size) -> tuple[int, int]:
    if isinstance(size, int):
        return size, size
    h, w = size
    return int(h), int(w)


@dataclass(frozen=True)
class Placement:
    """Top-left corner plus patch extent inside an ``image_size`` image.

    ``size == (0, 0)`` is the degenerate empty placement whose mask is all zeros.
    """

    top: int
    left: int
    size: tuple[int, int]
    image_size: tuple[int, int]

    def __post_init__(self):
        h, w = self.size
        H, W = self.image_size
        if h < 0 or w < 0:
            raise PlacementError(f"negative patch size {self.size}")
        if (h, w) != (0, 0) and (self.top < 0 or self.left < 0 or self.top + h > H or self.left + w > W):
            raise PlacementError(f"patch {h}x{w} at ({self.top}, {self.left}) leaves the {H}x{W} image")

    @classmethod
    def empty(cls, image_size) -> "Placement":
        return cls(0, 0, (0, 0), tuple(image_size))

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.image_size, dtype=np.float32)
        h, w = self.size
        m[self.top : self.top + h, self.left : self.left + w] = 1.0
        return m


def apply_patch(image, patch, placement: Placement):
    """Paste ``patch`` into ``image`` at ``placement``.

    ``image`` is an ``(H, W, 3)`` numpy array or a ``(3, H, W)`` / ``(N, 3, H, W)``
    tensor; ``patch`` a :class:`Patch`, an ``(h, w, 3)`` array, or a ``(3, h, w)``
    tensor (gradients flow into it). Pixels outside the mask are returned
    bit-for-bit.
    """
    if isinstance(image, np.ndarray):
        px = patch.pixels if isinstance(patch, Patch) else np.asarray(patch, dtype=image.dtype)
        if image.ndim != 3 or image.shape[-1] != 3:
            raise ValidationError(f"image must be (H, W, 3), got {image.shape}")
        _check_geometry(image.shape[:2], px.shape[:2], placement)
        mask = placement.mask.astype(image.dtype)[..., None]
        canvas = np.zeros_like(image)
        h, w = placement.size
        canvas[placement.top : placement.top + h, placement.left : placement.left + w] = px[:h, :w]
        return (1 - mask) * image + mask * canvas

    delta = patch.tensor() if isinstance(patch, Patch) else patch
    delta = delta.to(image.dtype)
    _check_geometry(tuple(image.shape[-2:]), tuple(delta.shape[-2:]), placement)
    h, w = placement.size
    H, W = placement.image_size
    if (h, w) == (0, 0):
        return image.clone()
    mask = torch.from_numpy(placement.mask).to(image.dtype)
    pad = (placement.left, W - placement.left - w, placement.top, H - placement.top - h)
    canvas = F.pad(delta, pad)
    return (1 - mask) * image + mask * canvas


def _check_geometry(image_hw, patch_hw, placement: Placement):
    if tuple(image_hw) != tuple(placement.image_size):
        raise ValidationError(f"image is {tuple(image_hw)}, placement was built for {placement.image_size}")
    if tuple(placement.size) != (0, 0) and tuple(patch_hw) != tuple(placement.size):
        raise ValidationError(f"patch is {tuple(patch_hw)}, placement expects {tuple(placement.size)}")


def apply_patch_batch(images: torch.Tensor, patch: torch.Tensor, tops, lefts) -> torch.Tensor:
    """Batched :func:`apply_patch` with one placement per image (differentiable in ``patch``)."""
    n, _, H, W = images.shape
    h, w = patch.shape[-2:]
    tops = torch.as_tensor(tops, dtype=torch.long)
    lefts = torch.as_tensor(lefts, dtype=torch.long)
    if len(tops) != n or len(lefts) != n:
        raise ValidationError("need one placement per image")
    if (tops < 0).any() or (lefts < 0).any() or (tops + h > H).any() or (lefts + w > W).any():
        raise PlacementError("a placement leaves the image")
    canvases, masks = [], []
    ones = torch.ones(1, h, w, dtype=images.dtype)
    for t, l in zip(tops.tolist(), lefts.tolist()):
        pad = (l, W - l - w, t, H - t - h)
        canvases.append(F.pad(patch.to(images.dtype), pad))
        masks.append(F.pad(ones, pad))
    canvas = torch.stack(canvases)
    mask = torch.stack(masks)
    return (1 - mask) * images + mask * canvas


POLICIES = ("fixed_center", "uniform_random")


def sample_placement(rng_seed, image_size, patch_size, policy: str = "fixed_center") -> Placement:
    """Placement for one image; ``uniform_random`` is reproducible from ``rng_seed``.

    ``rng_seed`` may also be a ``numpy.random.Generator`` to draw a sequence.
    """
    H, W = _pair(image_size)
    h, w = _pair(patch_size)
    if h > H or w > W:
        raise ValidationError(f"patch {h}x{w} larger than image {H}x{W}")
    if policy == "fixed_center":
        return Placement((H - h) // 2, (W - w) // 2, (h, w), (H, W))
    if policy == "uniform_random":
        rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
        top = int(rng.integers(0, H - h + 1))
        left = int(rng.integers(0, W - w + 1))
        return Placement(top, left, (h, w), (H, W))
    raise ValidationError(f"unknown placement policy {policy!r}; expected one of {POLICIES}")


def sample_positions(rng: np.random.Generator, n: int, image_size, patch_size, policy: str):
    """``n`` (top, left) pairs as two int arrays."""
    H, W = _pair(image_size)
    h, w = _pair(patch_size)
    if h > H or w > W:
        raise ValidationError(f"patch {h}x{w} larger than image {H}x{W}")
    if policy == "fixed_center":
        return np.full(n, (H - h) // 2), np.full(n, (W - w) // 2)
    if policy == "uniform_random":
        return rng.integers(0, H - h + 1, n), rng.integers(0, W - w + 1, n)
    raise ValidationError(f"unknown placement policy {policy!r}; expected one of {POLICIES}")


def timestamp() -> str:
    """UTC creation time; honours ``SOURCE_DATE_EPOCH`` for reproducible artifacts."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = time.gmtime(int(epoch)) if epoch else time.gmtime()
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", t)


def _to_png_array(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0, 1) * 255).astype(np.uint8)


def save_patch(patch: Patch, directory, stem: str = "patch", extra: dict | None = None) -> Path:
    """Write ``<stem>.png``, ``<stem>.npy`` (exact float pixels) and ``<stem>.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    Image.fromarray(_to_png_array(patch.pixels)).save(directory / f"{stem}.png", optimize=False)
    np.save(directory / f"{stem}.npy", patch.pixels)
    meta = {
        "id": patch.id,
        "provenance": patch.provenance.value,
        "area_budget": patch.area_budget,
        "image_size": list(patch.image_size),
        "patch_size": list(patch.shape),
        "created": patch.metadata.get("created", timestamp()),
        **{k: v for k, v in patch.metadata.items() if k != "created"},
        **(extra or {}),
    }
    (directory / f"{stem}.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=_json_default))
    return directory / f"{stem}.png"


def load_patch(directory, stem: str = "patch") -> Patch:
    directory = Path(directory)
    meta = json.loads((directory / f"{stem}.json").read_text())
    npy = directory / f"{stem}.npy"
    if npy.exists():
        pixels = np.load(npy)
    else:
        pixels = np.asarray(Image.open(directory / f"{stem}.png").convert("RGB"), dtype=np.float32) / 255.0
    known = {"id", "provenance", "area_budget", "image_size", "patch_size"}
    return Patch(
        pixels,
        tuple(meta["image_size"]),
        Provenance(meta["provenance"]),
        id=meta["id"],
        area_budget=meta["area_budget"],
        metadata={k: v for k, v in meta.items() if k not in known},
    )


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (set, frozenset, tuple)):
        return sorted(obj) if isinstance(obj, (set, frozenset)) else list(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")
