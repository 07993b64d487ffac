"""Random differentiable warps for expectation-over-transformation training.

Three warp kinds, each with a scalar parameter drawn uniformly from a range:

* rotation: angle in degrees about the image centre;
* distortion: radial barrel coefficient ``k``; a source point is
  ``p * (1 + k * |p|^2)`` in normalised coordinates;
* affine: a rate in [0, 4]; ``rate / 4`` scales a random shear (up to 0.25) and
  isotropic scale jitter (up to 10%).

All warps resample bilinearly with ``grid_sample``; pixels that come from
outside the frame are filled with 0.5 grey.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ValidationError

KINDS = ("rotation", "distortion", "affine")
NOMINAL_BOUNDS = {"rotation": (-30.0, 30.0), "distortion": (0.0, 0.1), "affine": (0.0, 4.0)}
MAX_SHEAR = 0.25
MAX_SCALE_JITTER = 0.10
FILL = 0.5


@dataclass
class TransformConfig:
    rotation_range: tuple[float, float] = (-30.0, 30.0)
    distortion_range: tuple[float, float] = (0.0, 0.1)
    affine_range: tuple[float, float] = (0.0, 4.0)
    enabled: frozenset = field(default_factory=lambda: frozenset(KINDS))
    samples_per_step: int = 4
    allow_out_of_range: bool = False

    def __post_init__(self):
        self.enabled = frozenset(self.enabled)
        unknown = self.enabled - set(KINDS)
        if unknown:
            raise ValidationError(f"unknown transform kinds {sorted(unknown)}")
        if self.samples_per_step < 1:
            raise ValidationError("samples_per_step must be >= 1")
        for kind in KINDS:
            lo, hi = self.range(kind)
            if lo > hi:
                raise ValidationError(f"{kind} range is empty: ({lo}, {hi})")
            blo, bhi = NOMINAL_BOUNDS[kind]
            if not self.allow_out_of_range and (lo < blo or hi > bhi):
                raise ValidationError(
                    f"{kind} range ({lo}, {hi}) exceeds ({blo}, {bhi}); set allow_out_of_range to override"
                )

    def range(self, kind: str) -> tuple[float, float]:
        return tuple(getattr(self, f"{kind}_range"))

    @classmethod
    def only(cls, *kinds: str, **kw) -> "TransformConfig":
        return cls(enabled=frozenset(kinds), **kw)

    def to_dict(self) -> dict:
        return {
            "rotation_range": list(self.rotation_range),
            "distortion_range": list(self.distortion_range),
            "affine_range": list(self.affine_range),
            "enabled": sorted(self.enabled),
            "samples_per_step": self.samples_per_step,
        }


@dataclass(frozen=True)
class TransformInstance:
    """Drawn parameters; disabled kinds keep their identity values."""

    rotation: float = 0.0
    distortion: float = 0.0
    affine_rate: float = 0.0
    shear_x: float = 0.0
    shear_y: float = 0.0
    scale: float = 1.0

    def params(self) -> dict:
        return {
            "rotation": self.rotation,
            "distortion": self.distortion,
            "affine_rate": self.affine_rate,
            "shear_x": self.shear_x,
            "shear_y": self.shear_y,
            "scale": self.scale,
        }


IDENTITY = TransformInstance()


def sample_transform(config: TransformConfig, rng: np.random.Generator) -> TransformInstance:
    """Draw one instance. The draw order is fixed so sequences replay from a seed."""
    if not config.enabled:
        raise ValidationError("no transform kind enabled")
    kw = {}
    if "rotation" in config.enabled:
        kw["rotation"] = float(rng.uniform(*config.rotation_range))
    if "distortion" in config.enabled:
        kw["distortion"] = float(rng.uniform(*config.distortion_range))
    if "affine" in config.enabled:
        rate = float(rng.uniform(*config.affine_range))
        mag = rate / 4.0
        sx, sy, sc = rng.uniform(-1.0, 1.0, 3)
        kw.update(
            affine_rate=rate,
            shear_x=float(mag * MAX_SHEAR * sx),
            shear_y=float(mag * MAX_SHEAR * sy),
            scale=float(1.0 + mag * MAX_SCALE_JITTER * sc),
        )
    return TransformInstance(**kw)


def sample_transforms(config: TransformConfig, rng: np.random.Generator, n: int) -> list[TransformInstance]:
    return [sample_transform(config, rng) for _ in range(n)]


def _sampling_grid(inst: TransformInstance, H: int, W: int, dtype) -> torch.Tensor:
    """Source coordinates (normalised, ``grid_sample`` convention) for every output pixel."""
    # pixel-centre coordinates, aspect-corrected so rotation is a true rotation
    ys = (torch.arange(H, dtype=dtype) + 0.5) / H * 2 - 1
    xs = (torch.arange(W, dtype=dtype) + 0.5) / W * 2 - 1
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    ax = W / max(H, W)
    ay = H / max(H, W)
    px, py = gx * ax, gy * ay

    # output -> source is the inverse of the forward warp: undo rotation first
    theta = math.radians(inst.rotation)
    c, s = math.cos(theta), math.sin(theta)
    qx = c * px + s * py
    qy = -s * px + c * py

    a = torch.tensor([[inst.scale, inst.shear_x], [inst.shear_y, inst.scale]], dtype=torch.float64)
    inv = torch.linalg.inv(a).to(dtype)
    rx = inv[0, 0] * qx + inv[0, 1] * qy
    ry = inv[1, 0] * qx + inv[1, 1] * qy

    if inst.distortion:
        r2 = rx * rx + ry * ry
        f = 1 + inst.distortion * r2
        rx, ry = rx * f, ry * f

    return torch.stack([rx / ax, ry / ay], dim=-1)


def apply_transform(instance, images: torch.Tensor) -> torch.Tensor:
    """Warp ``(3, H, W)`` or ``(N, 3, H, W)`` images.

    ``instance`` is one :class:`TransformInstance` for all images or a sequence
    with one per image. Differentiable with respect to ``images``; the output is
    clamped to [0, 1].
    """
    single = images.dim() == 3
    x = images[None] if single else images
    if x.dim() != 4:
        raise ValidationError(f"expected (3, H, W) or (N, 3, H, W), got {tuple(images.shape)}")
    n, _, H, W = x.shape
    insts: Sequence[TransformInstance] = [instance] * n if isinstance(instance, TransformInstance) else list(instance)
    if len(insts) != n:
        raise ValidationError(f"{len(insts)} transform instances for {n} images")
    cache: dict[TransformInstance, torch.Tensor] = {}
    grids = []
    for inst in insts:
        if inst not in cache:
            cache[inst] = _sampling_grid(inst, H, W, x.dtype)
        grids.append(cache[inst])
    grid = torch.stack(grids)
    out = F.grid_sample(x - FILL, grid, mode="bilinear", padding_mode="zeros", align_corners=False) + FILL
    out = out.clamp(0.0, 1.0)
    return out[0] if single else out
