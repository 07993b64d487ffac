"""Classifier handle, the built-in small CNN, and checkpoint persistence.

Images flow through the library as float tensors in [0, 1]. A single image may
be given as a ``(3, H, W)`` tensor or an ``(H, W, 3)`` numpy array; batches are
``(N, 3, H, W)`` tensors.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CheckpointError, InputShapeError, ValidationError

log = logging.getLogger(__name__)


def to_tensor(image) -> torch.Tensor:
    """Return a float ``(3, H, W)`` or ``(N, 3, H, W)`` tensor from numpy or torch input."""
    if isinstance(image, np.ndarray):
        arr = image
        if arr.ndim == 3 and arr.shape[-1] == 3 and arr.shape[0] != 3:
            arr = arr.transpose(2, 0, 1)
        elif arr.ndim == 4 and arr.shape[-1] == 3 and arr.shape[1] != 3:
            arr = arr.transpose(0, 3, 1, 2)
        image = torch.from_numpy(np.ascontiguousarray(arr))
    if not torch.is_tensor(image):
        raise ValidationError(f"expected an array or tensor, got {type(image).__name__}")
    if not image.is_floating_point():
        image = image.float()
    return image


def to_hwc(image: torch.Tensor) -> np.ndarray:
    """``(3, H, W)`` tensor to ``(H, W, 3)`` numpy array."""
    return image.detach().cpu().permute(1, 2, 0).numpy()


def preprocess(image, input_size: tuple[int, int]) -> torch.Tensor:
    """Resize to ``input_size`` (bilinear) and clamp to [0, 1]. Keeps batch-ness."""
    x = to_tensor(image)
    single = x.dim() == 3
    if single:
        x = x[None]
    if x.dim() != 4 or x.shape[1] != 3:
        raise InputShapeError(f"expected RGB image(s), got shape {tuple(x.shape)}")
    if tuple(x.shape[-2:]) != tuple(input_size):
        x = F.interpolate(x, size=tuple(input_size), mode="bilinear", align_corners=False)
    x = x.clamp(0.0, 1.0)
    return x[0] if single else x


class SmallCNN(nn.Module):
    """Conv-BN-ReLU blocks with 2x max-pool downsampling and a global pooling head.

    Block outputs (post-ReLU, pre-pool) are named ``conv1`` .. ``convN`` and can be
    tapped as feature layers.
    """

    def __init__(self, num_classes: int = 10, width: int = 16, n_blocks: int = 4, pool: str = "max"):
        super().__init__()
        if pool not in ("max", "avg"):
            raise ValidationError(f"pool must be 'max' or 'avg', got {pool!r}")
        chans = [3] + [width * min(2**i, 4) for i in range(n_blocks)]
        self.block_names = [f"conv{i + 1}" for i in range(n_blocks)]
        for i, name in enumerate(self.block_names):
            setattr(self, name, nn.Sequential(
                nn.Conv2d(chans[i], chans[i + 1], 3, padding=1),
                nn.BatchNorm2d(chans[i + 1]),
                nn.ReLU(),
            ))
        self.pool = pool
        self.head = nn.Linear(chans[-1], num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n = len(self.block_names)
        for i, name in enumerate(self.block_names):
            x = getattr(self, name)(x)
            if i < n - 1:
                x = F.max_pool2d(x, 2)
        x = x.amax(dim=(2, 3)) if self.pool == "max" else x.mean(dim=(2, 3))
        return self.head(x)


ARCHITECTURES = {"small_cnn": SmallCNN}


def build_model(arch: dict) -> nn.Module:
    arch = dict(arch)
    name = arch.pop("name", "small_cnn")
    if name not in ARCHITECTURES:
        raise ValidationError(f"unknown architecture {name!r}")
    return ARCHITECTURES[name](**arch)


@dataclass
class ClassifierHandle:
    """A frozen, differentiable image classifier.

    ``feature_layers`` are names of submodules (``model.named_modules()``) whose
    outputs can be read back with :meth:`feature_maps` / :meth:`forward_with_features`.
    """

    model: nn.Module
    num_classes: int
    input_size: tuple[int, int]
    feature_layers: list[str]
    label_names: list[str] = field(default_factory=list)
    model_id: str = "model"
    arch: dict = field(default_factory=dict)
    train_config_hash: str = ""

    def __post_init__(self):
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        modules = dict(self.model.named_modules())
        missing = [name for name in self.feature_layers if name not in modules]
        if missing:
            raise ValidationError(f"feature layers not found in model: {missing}")
        self.input_size = tuple(self.input_size)
        if not self.label_names:
            self.label_names = [str(i) for i in range(self.num_classes)]

    def _check(self, x: torch.Tensor) -> torch.Tensor:
        x = to_tensor(x)
        if x.dim() == 3:
            x = x[None]
        if x.dim() != 4 or x.shape[1] != 3 or tuple(x.shape[-2:]) != self.input_size:
            raise InputShapeError(
                f"expected (N, 3, {self.input_size[0]}, {self.input_size[1]}), got {tuple(x.shape)}"
            )
        if not torch.isfinite(x).all():
            raise ValidationError("image contains non-finite pixels")
        return x

    def logits(self, x) -> torch.Tensor:
        return self.model(self._check(x))

    def probabilities(self, x) -> torch.Tensor:
        return F.softmax(self.logits(x), dim=1)

    def predict(self, image) -> tuple[int, np.ndarray]:
        """Label and probability vector of one image. Ties go to the lowest index."""
        with torch.no_grad():
            probs = self.probabilities(image)[0].double().numpy()
        # np.argmax returns the first maximum
        return int(np.argmax(probs)), probs

    def predict_batch(self, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
        """Probabilities of a batch, evaluated in chunks without autograd."""
        out = []
        with torch.no_grad():
            for i in range(0, len(images), batch_size):
                out.append(self.probabilities(images[i : i + batch_size]))
        return torch.cat(out) if out else torch.empty(0, self.num_classes)

    def forward_with_features(self, x, layers: Sequence[str], edit=None):
        """Run the model and capture the outputs of ``layers``.

        ``edit`` may map a layer name to a function applied to that layer's output
        before it propagates further (used to expose normalised feature maps).
        Returns ``(logits, {layer: activation})``.
        """
        x = self._check(x)
        modules = dict(self.model.named_modules())
        captured: dict[str, torch.Tensor] = {}
        hooks = []
        for name in layers:
            if name not in modules or name not in self.feature_layers:
                raise KeyError(f"unknown feature layer {name!r}; available: {self.feature_layers}")

            def hook(_m, _inp, out, name=name):
                if edit and name in edit:
                    out = edit[name](out)
                captured[name] = out
                return out

            hooks.append(modules[name].register_forward_hook(hook))
        try:
            logits = self.model(x)
        finally:
            for h in hooks:
                h.remove()
        return logits, captured

    def feature_maps(self, image, layer_name: str) -> torch.Tensor:
        """Activations ``(w, u, v)`` of one layer for a single image (differentiable)."""
        x = to_tensor(image)
        single = x.dim() == 3
        _, feats = self.forward_with_features(x, [layer_name])
        out = feats[layer_name]
        return out[0] if single else out


def _config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


def train_classifier(
    train_images: torch.Tensor,
    train_labels: torch.Tensor,
    arch: dict | None = None,
    epochs: int = 6,
    lr: float = 1e-3,
    batch_size: int = 64,
    seed: int = 0,
    label_names: Sequence[str] | None = None,
    model_id: str = "small_cnn",
) -> ClassifierHandle:
    """Plain supervised cross-entropy training with Adam."""
    arch = {"name": "small_cnn", "num_classes": 10, "width": 16, "n_blocks": 4, "pool": "max", **(arch or {})}
    torch.manual_seed(seed)
    model = build_model(arch)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    n = len(train_labels)
    for epoch in range(epochs):
        perm = torch.randperm(n, generator=gen)
        total = 0.0
        for i in range(0, n, batch_size):
            idx = perm[i : i + batch_size]
            loss = F.cross_entropy(model(train_images[idx]), train_labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        log.info("classifier epoch %d loss %.4f", epoch, total / n)
    cfg = {"arch": arch, "epochs": epochs, "lr": lr, "batch_size": batch_size, "seed": seed, "n": n}
    n_blocks = arch.get("n_blocks", 4)
    return ClassifierHandle(
        model=model,
        num_classes=arch["num_classes"],
        input_size=tuple(train_images.shape[-2:]),
        feature_layers=[f"conv{i + 1}" for i in range(n_blocks)],
        label_names=list(label_names or []),
        model_id=model_id,
        arch=arch,
        train_config_hash=_config_hash(cfg),
    )


def accuracy(handle: ClassifierHandle, images: torch.Tensor, labels: torch.Tensor) -> float:
    probs = handle.predict_batch(images)
    return float((probs.argmax(1) == labels).float().mean())


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def save_checkpoint(handle: ClassifierHandle, path) -> Path:
    """Write ``path`` (torch state dict) plus a JSON sidecar next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(handle.model.state_dict(), path)
    meta = {
        "num_classes": handle.num_classes,
        "input_size": list(handle.input_size),
        "feature_layers": list(handle.feature_layers),
        "label_names": list(handle.label_names),
        "model_id": handle.model_id,
        "arch": handle.arch,
        "training_config_hash": handle.train_config_hash,
    }
    _sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def load_checkpoint(path, num_classes: int | None = None) -> ClassifierHandle:
    """Inverse of :func:`save_checkpoint`.

    Raises ``FileNotFoundError`` for a missing file and :class:`CheckpointError`
    naming the offending field for corrupt or mismatched content.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    side = _sidecar(path)
    if not side.exists():
        raise FileNotFoundError(f"checkpoint sidecar not found: {side}")
    try:
        meta = json.loads(side.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"sidecar is not valid JSON: {exc}", field="sidecar") from exc
    for key in ("num_classes", "input_size", "feature_layers", "arch"):
        if key not in meta:
            raise CheckpointError("sidecar is missing a required field", field=key)
    if num_classes is not None and meta["num_classes"] != num_classes:
        raise CheckpointError(
            f"checkpoint has {meta['num_classes']} classes, expected {num_classes}", field="num_classes"
        )
    if meta["arch"].get("num_classes", meta["num_classes"]) != meta["num_classes"]:
        raise CheckpointError("arch and sidecar disagree on class count", field="num_classes")
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a zoo of types for damaged files
        raise CheckpointError(f"cannot read state dict: {exc}", field="state_dict") from exc
    model = build_model(meta["arch"])
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"state dict does not match architecture: {exc}", field="state_dict") from exc
    return ClassifierHandle(
        model=model,
        num_classes=meta["num_classes"],
        input_size=tuple(meta["input_size"]),
        feature_layers=list(meta["feature_layers"]),
        label_names=list(meta.get("label_names", [])),
        model_id=meta.get("model_id", "model"),
        arch=meta["arch"],
        train_config_hash=meta.get("training_config_hash", ""),
    )
