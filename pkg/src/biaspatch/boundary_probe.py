"""Decision-boundary distance measured in L2-normalised gradient steps.

For every class other than the current prediction, the probe walks the image
towards that class with fixed-length L2 steps (ascending the log-probability
of the class, clamping to [0, 1]) and counts the steps until the prediction
changes. Directions that never flip within ``max_steps`` are marked saturated.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ValidationError
from .evaluator import write_csv
from .model_zoo import ClassifierHandle, to_tensor
from .patch_core import Patch, apply_patch, sample_placement

log = logging.getLogger(__name__)

SATURATED = "saturated"


@dataclass
class BoundaryReport:
    source_image_id: str
    original_prediction: int
    per_class_steps: dict[int, int | str]
    pgd_step_size: float
    max_steps: int
    norm: str = "L2"
    warnings: list[str] = field(default_factory=list)

    def steps_array(self, censor: int | None = None) -> np.ndarray:
        """Step counts with saturated directions replaced by ``censor`` (default ``max_steps + 1``)."""
        censor = self.max_steps + 1 if censor is None else censor
        return np.array([censor if v == SATURATED else v for v in self.per_class_steps.values()], dtype=float)

    @property
    def n_saturated(self) -> int:
        return sum(v == SATURATED for v in self.per_class_steps.values())

    def to_json(self) -> str:
        d = {
            "source_image_id": self.source_image_id,
            "original_prediction": self.original_prediction,
            "per_class_steps": {str(k): v for k, v in self.per_class_steps.items()},
            "pgd_step_size": self.pgd_step_size,
            "max_steps": self.max_steps,
            "norm": self.norm,
            "warnings": self.warnings,
        }
        return json.dumps(d, indent=2, sort_keys=True)


def boundary_distance(
    handle: ClassifierHandle,
    image,
    target_classes: Sequence[int] | None = None,
    alpha: float = 0.01,
    max_steps: int = 500,
    label: int | None = None,
    image_id: str = "image",
) -> BoundaryReport:
    """Probe every direction in ``target_classes`` (default: all classes but the prediction).

    All directions are walked in one batch; each row keeps its own step count.
    """
    if alpha <= 0:
        raise ValidationError("step size must be positive")
    x0 = to_tensor(image)
    if x0.dim() == 4:
        x0 = x0[0]
    if x0.min() < 0 or x0.max() > 1:
        raise ValidationError("image outside [0, 1]")
    pred, _ = handle.predict(x0)
    warnings = []
    if label is not None and label != pred:
        warnings.append(f"image labelled {label} is predicted {pred}; probing from the prediction")
        log.warning(warnings[-1])
    dirs = [c for c in (range(handle.num_classes) if target_classes is None else target_classes) if c != pred]
    if not dirs:
        return BoundaryReport(image_id, pred, {}, alpha, max_steps, warnings=warnings)

    targets = torch.tensor(dirs, dtype=torch.long)
    x = x0[None].repeat(len(dirs), 1, 1, 1).clone()
    steps = torch.zeros(len(dirs), dtype=torch.long)
    active = torch.ones(len(dirs), dtype=torch.bool)
    for s in range(1, max_steps + 1):
        xa = x[active].clone().requires_grad_(True)
        logp = F.log_softmax(handle.logits(xa), dim=1)
        obj = logp.gather(1, targets[active][:, None]).sum()
        (g,) = torch.autograd.grad(obj, xa)
        norm = g.flatten(1).norm(dim=1).clamp_min(1e-12)[:, None, None, None]
        with torch.no_grad():
            xa = (xa + alpha * g / norm).clamp(0.0, 1.0)
            flipped = handle.logits(xa).argmax(1) != pred
        idx = torch.nonzero(active)[:, 0]
        x[idx] = xa.detach()
        steps[idx[flipped]] = s
        active[idx[flipped]] = False
        if not active.any():
            break
    per_class = {int(c): (int(k) if k > 0 else SATURATED) for c, k in zip(dirs, steps)}
    return BoundaryReport(image_id, pred, per_class, alpha, max_steps, warnings=warnings)


def embed_prior(prior, image_size, fill: float = 0.5) -> torch.Tensor:
    """A patch goes at the centre of a grey canvas; image-sized inputs (single or batched) are used as is."""
    if isinstance(prior, Patch):
        canvas = np.full((*image_size, 3), fill, dtype=np.float32)
        placement = sample_placement(0, image_size, prior.shape, "fixed_center")
        return torch.from_numpy(apply_patch(canvas, prior, placement)).permute(2, 0, 1).contiguous()
    x = to_tensor(prior)
    if x.dim() not in (3, 4) or tuple(x.shape[-2:]) != tuple(image_size):
        raise ValidationError(f"prior of shape {tuple(x.shape)} is neither a Patch nor image-sized")
    return x


def compare_priors(
    handle: ClassifierHandle,
    priors: dict[str, object],
    alpha: float = 0.01,
    max_steps: int = 500,
) -> list[dict]:
    """Mean / median step counts per prior, sorted ascending by mean (then median, then name).

    A prior may also be a batch ``(N, 3, H, W)`` of images (e.g. a whole hard
    set); its statistics then pool the directions of every image. Saturated
    directions enter the statistics as ``max_steps + 1``.
    """
    if len(priors) < 2:
        raise ValidationError("compare at least two priors")
    rows = []
    for name, prior in priors.items():
        x = embed_prior(prior, handle.input_size)
        batch = x if x.dim() == 4 else x[None]
        reps = [
            boundary_distance(handle, img, alpha=alpha, max_steps=max_steps, image_id=f"{name}#{i}")
            for i, img in enumerate(batch)
        ]
        arr = np.concatenate([r.steps_array() for r in reps])
        row = {
            "prior": name,
            "n_images": len(reps),
            "mean_steps": float(arr.mean()) if len(arr) else float("nan"),
            "median_steps": float(np.median(arr)) if len(arr) else float("nan"),
            "n_saturated": sum(r.n_saturated for r in reps),
        }
        if len(reps) == 1:
            row["prediction"] = reps[0].original_prediction
            row["per_class"] = {str(k): v for k, v in reps[0].per_class_steps.items()}
        rows.append(row)
    rows.sort(key=lambda r: (r["mean_steps"], r["median_steps"], r["prior"]))
    for rank, r in enumerate(rows, 1):
        r["rank"] = rank
    return rows


def save_comparison(rows: list[dict], directory, plot: bool = True) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    flat = [{k: v for k, v in r.items() if k != "per_class"} for r in rows]
    write_csv(directory / "prior_comparison.csv", flat)
    (directory / "prior_comparison.json").write_text(json.dumps({"rows": rows}, indent=2, sort_keys=True))
    if plot:
        from .plots import bar_chart

        bar_chart(
            [r["prior"] for r in rows],
            [r["mean_steps"] for r in rows],
            directory / "prior_comparison.png",
            ylabel="mean PGD steps to flip",
            title="Decision-boundary distance by prior",
        )
    return directory / "prior_comparison.csv"
