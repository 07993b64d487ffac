"""Stage 1: fuse hard examples into one textural prior.

A fused image ``x*`` is optimised so that its Gram statistics match a set of
hard examples (style loss) while the classifier stays uncertain about it
(uncertainty loss). A gradient-attention map then picks the patch-sized window
of ``x*`` that the classifier responds to most.
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
from PIL import Image

from .errors import InputShapeError, OptimizationError, ValidationError
from .hard_mining import HardExampleSet
from .model_zoo import ClassifierHandle, to_tensor
from .patch_core import Patch, Provenance, _pair

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
UNCERTAINTY_MODES = ("neg_entropy", "literal_eq4")


def gram_matrix(features: torch.Tensor) -> torch.Tensor:
    """Channel inner products ``G_ij = sum_k F_ik F_jk`` over flattened positions.

    ``features`` is ``(w, u, v)`` or batched ``(N, w, u, v)``; the result is
    ``(w, w)`` or ``(N, w, w)``. No normalisation is applied.
    """
    f = to_tensor(features)
    if not torch.isfinite(f).all():
        raise ValidationError("features contain non-finite values")
    if f.dim() not in (3, 4):
        raise InputShapeError(f"expected (w, u, v) or (N, w, u, v), got {tuple(f.shape)}")
    flat = f.flatten(start_dim=-2)
    return flat @ flat.transpose(-1, -2)


def _grams(handle: ClassifierHandle, x: torch.Tensor, layers: Sequence[str]):
    logits, feats = handle.forward_with_features(x, layers)
    return logits, {name: gram_matrix(feats[name]) for name in layers}


def style_loss(x_star, hard_batch, handle: ClassifierHandle, layers: Sequence[str], target_grams=None):
    """Mean over the batch of squared Frobenius Gram distance, summed over ``layers``.

    ``target_grams`` (layer -> ``(N, w, w)``) can be passed to avoid recomputing
    the hard examples' Gram matrices every step.
    """
    x = to_tensor(x_star)
    if x.dim() == 3:
        x = x[None]
    if target_grams is None:
        hb = to_tensor(hard_batch)
        if hb.dim() == 3:
            hb = hb[None]
        if hb.shape[0] == 0:
            raise ValidationError("style loss needs a non-empty batch")
        with torch.no_grad():
            _, target_grams = _grams(handle, hb, layers)
    _, g_star = _grams(handle, x, layers)
    total = x.new_zeros(())
    for name in layers:
        diff = g_star[name][0][None] - target_grams[name]
        total = total + diff.pow(2).sum(dim=(-2, -1)).mean()
    return total


def uncertainty_from_probs(probs: torch.Tensor, mode: str = "neg_entropy") -> torch.Tensor:
    """Uncertainty loss from a probability vector (or batch, averaged)."""
    if mode not in UNCERTAINTY_MODES:
        raise ValidationError(f"mode must be one of {UNCERTAINTY_MODES}, got {mode!r}")
    logp = probs.clamp_min(PROB_FLOOR).log()
    if mode == "neg_entropy":
        per = (probs * logp).sum(-1)
    else:
        per = logp.mean(-1)
    return per.mean()


def uncertainty_loss(x_star, handle: ClassifierHandle, mode: str = "neg_entropy") -> torch.Tensor:
    """``neg_entropy``: sum_i p_i log p_i. ``literal_eq4``: mean_i log p_i."""
    x = to_tensor(x_star)
    if x.dim() == 3:
        x = x[None]
    return uncertainty_from_probs(handle.probabilities(x), mode)


@dataclass
class FusedExample:
    pixels: torch.Tensor  # (3, H, W)
    init_source: str
    loss_trace: list[tuple[int, float, float, float]]
    lam: float = 1.0
    mode: str = "neg_entropy"
    seed: int = 0
    metadata: dict = field(default_factory=dict)

    def save(self, directory, stem: str = "fused") -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        arr = self.pixels.permute(1, 2, 0).numpy()
        Image.fromarray(np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)).save(directory / f"{stem}.png")
        np.save(directory / f"{stem}.npy", arr)
        meta = {
            "init_source": self.init_source,
            "loss_trace": [list(t) for t in self.loss_trace],
            "lambda": self.lam,
            "mode": self.mode,
            "seed": self.seed,
            **self.metadata,
        }
        (directory / f"{stem}.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        return directory / f"{stem}.png"

    @classmethod
    def load(cls, directory, stem: str = "fused") -> "FusedExample":
        directory = Path(directory)
        meta = json.loads((directory / f"{stem}.json").read_text())
        arr = np.load(directory / f"{stem}.npy")
        known = ("init_source", "loss_trace", "lambda", "mode", "seed")
        return cls(
            pixels=torch.from_numpy(arr).permute(2, 0, 1).contiguous(),
            init_source=meta["init_source"],
            loss_trace=[tuple(t) for t in meta["loss_trace"]],
            lam=meta["lambda"],
            mode=meta["mode"],
            seed=meta["seed"],
            metadata={k: v for k, v in meta.items() if k not in known},
        )


def _full_losses(handle, x, target_grams, layers, lam, mode):
    with torch.no_grad():
        ls = float(style_loss(x, None, handle, layers, target_grams=target_grams))
        lu = float(uncertainty_loss(x, handle, mode))
    return ls, lu, ls + lam * lu


def fuse_prior(
    hard_set: HardExampleSet,
    handle: ClassifierHandle,
    lam: float = 1.0,
    epochs: int = 50,
    batch_size: int = 10,
    lr: float = 0.01,
    mode: str = "neg_entropy",
    layers: Sequence[str] | None = None,
    seed: int = 0,
    weight_decay: float = 1e-4,
) -> FusedExample:
    """Optimise a fused example from a random hard example under ``L_s + lam * L_u``.

    Each epoch takes ``ceil(r / batch_size)`` Adam steps on shuffled minibatches,
    clamping pixels to [0, 1] after every step. The trace holds the losses over
    the whole hard set before training (epoch 0) and after each epoch.
    """
    if len(hard_set) == 0:
        raise ValidationError("hard-example set is empty")
    if mode not in UNCERTAINTY_MODES:
        raise ValidationError(f"mode must be one of {UNCERTAINTY_MODES}, got {mode!r}")
    layers = list(layers) if layers is not None else default_style_layers(handle)
    if len(hard_set.distinct_labels) < 2:
        log.warning("fusing a single-class hard set")

    rng = np.random.default_rng(seed)
    start = int(rng.integers(len(hard_set)))
    x = hard_set.images[start].clone()[None].requires_grad_(True)
    opt = torch.optim.Adam([x], lr=lr, weight_decay=weight_decay)

    images = hard_set.images
    with torch.no_grad():
        _, all_grams = _grams(handle, images, layers)

    trace = [(0, *_full_losses(handle, x.detach(), all_grams, layers, lam, mode))]
    n = len(hard_set)
    for epoch in range(1, epochs + 1):
        perm = rng.permutation(n)
        for i in range(0, n, batch_size):
            idx = torch.as_tensor(perm[i : i + batch_size])
            batch_grams = {name: g[idx] for name, g in all_grams.items()}
            ls = style_loss(x, None, handle, layers, target_grams=batch_grams)
            lu = uncertainty_loss(x, handle, mode)
            loss = ls + lam * lu
            if not torch.isfinite(loss):
                raise OptimizationError(f"fusion loss became non-finite at epoch {epoch}", trace)
            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                x.clamp_(0.0, 1.0)
        losses = _full_losses(handle, x.detach(), all_grams, layers, lam, mode)
        if not np.isfinite(losses[2]):
            raise OptimizationError(f"fusion loss became non-finite at epoch {epoch}", trace)
        trace.append((epoch, *losses))
        log.debug("fusion epoch %d: L_s %.4g L_u %.4g L_f %.4g", epoch, *losses)

    return FusedExample(
        pixels=x.detach()[0].clone(),
        init_source=f"{hard_set.source_split}#{hard_set.indices[start]}",
        loss_trace=trace,
        lam=lam,
        mode=mode,
        seed=seed,
        metadata={"layers": layers, "epochs": epochs, "batch_size": batch_size, "lr": lr, "weight_decay": weight_decay},
    )


def default_style_layers(handle: ClassifierHandle) -> list[str]:
    """The two mid-depth feature layers (or all of them if there are fewer than three)."""
    layers = list(handle.feature_layers)
    if len(layers) < 3:
        return layers
    mid = len(layers) // 2
    return layers[mid - 1 : mid + 1]


@dataclass
class AttentionMap:
    weights: np.ndarray  # (u, v)
    layer_name: str
    source_label: int


def normalize_maps(features: torch.Tensor, eps: float = 1e-12):
    """Per-map min-max normalisation. Returns ``(Z, lo, span)`` with ``F = Z * span + lo``."""
    lo = features.amin(dim=(-2, -1), keepdim=True).detach()
    hi = features.amax(dim=(-2, -1), keepdim=True).detach()
    span = (hi - lo).clamp_min(eps)
    return (features - lo) / span, lo, span


def attention_weights(handle: ClassifierHandle, image, layer_name: str, target_label: int) -> AttentionMap:
    """Per-position attention ``a_ij = sum_k dy/dZ^k_ij * Z^k_ij``.

    ``Z`` is the min-max normalised feature map of ``layer_name`` and ``y`` the
    pre-softmax logit of ``target_label``.
    """
    if not 0 <= target_label < handle.num_classes:
        raise ValidationError(f"target label {target_label} outside [0, {handle.num_classes})")
    if layer_name not in handle.feature_layers:
        raise KeyError(f"unknown feature layer {layer_name!r}; available: {handle.feature_layers}")
    x = to_tensor(image)
    if x.dim() == 3:
        x = x[None]
    holder = {}

    def expose(out):
        z, lo, span = normalize_maps(out)
        z = z.detach().requires_grad_(True)
        holder["z"] = z
        return z * span + lo

    logits, _ = handle.forward_with_features(x, [layer_name], edit={layer_name: expose})
    z = holder["z"]
    (grad,) = torch.autograd.grad(logits[0, target_label], z)
    weights = (grad * z.detach()).sum(dim=1)[0]
    return AttentionMap(weights.double().numpy(), layer_name, int(target_label))


def window_sums(att: np.ndarray, size) -> np.ndarray:
    """Sum of ``att`` over every ``size`` window, indexed by the window's top-left corner."""
    h, w = _pair(size)
    view = np.lib.stride_tricks.sliding_window_view(att, (h, w))
    return view.sum(axis=(-2, -1))


def crop_prior(
    fused: FusedExample,
    attention: AttentionMap,
    patch_size,
    area_budget: float | None = None,
    patch_id: str = "fused_prior",
) -> Patch:
    """Crop the ``patch_size`` window of the fused example with the largest attention mass.

    The attention map is bilinearly upsampled to image resolution first; ties go
    to the smallest ``(top, left)``.
    """
    h, w = _pair(patch_size)
    H, W = fused.pixels.shape[-2:]
    if h > H or w > W:
        raise ValidationError(f"patch {h}x{w} does not fit a {H}x{W} image")
    att = torch.from_numpy(np.asarray(attention.weights, dtype=np.float64))[None, None]
    up = F.interpolate(att, size=(H, W), mode="bilinear", align_corners=False)[0, 0].numpy()
    sums = window_sums(up, (h, w))
    top, left = np.unravel_index(int(np.argmax(sums)), sums.shape)
    crop = fused.pixels[:, top : top + h, left : left + w]
    kw = {} if area_budget is None else {"area_budget": area_budget}
    return Patch.from_tensor(
        crop,
        (H, W),
        provenance=Provenance.FUSED_PRIOR,
        id=patch_id,
        metadata={
            "crop_top": int(top),
            "crop_left": int(left),
            "attention_layer": attention.layer_name,
            "attention_label": attention.source_label,
        },
        **kw,
    )


def extract_prior(
    fused: FusedExample,
    handle: ClassifierHandle,
    patch_size,
    layer_name: str | None = None,
    area_budget: float | None = None,
) -> tuple[Patch, AttentionMap]:
    """Attention on the fused example w.r.t. its own predicted class, then crop."""
    layer_name = layer_name or handle.feature_layers[-1]
    label, _ = handle.predict(fused.pixels)
    att = attention_weights(handle, fused.pixels, layer_name, label)
    return crop_prior(fused, att, patch_size, area_budget=area_budget), att
