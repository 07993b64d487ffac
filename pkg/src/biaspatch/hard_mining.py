"""Hard-example mining against a frozen classifier."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ValidationError
from .model_zoo import ClassifierHandle

log = logging.getLogger(__name__)

CRITERIA = ("misclassified", "low_confidence", "union")


@dataclass
class HardExampleSet:
    """Mined examples, ranked by ascending true-class confidence."""

    images: torch.Tensor
    labels: torch.Tensor
    predictions: torch.Tensor
    confidences: torch.Tensor
    indices: list[int]
    source_split: str
    criterion: str
    threshold: float
    shortage: dict | None = None
    seed: int = 0
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def distinct_labels(self) -> set[int]:
        return set(self.labels.tolist())

    def manifest(self) -> dict:
        return {
            "source_split": self.source_split,
            "criterion": self.criterion,
            "threshold": self.threshold,
            "seed": self.seed,
            "shortage": self.shortage,
            "items": [
                {
                    "path": f"{self.source_split}#{i}",
                    "index": i,
                    "label": int(y),
                    "predicted": int(p),
                    "confidence": float(c),
                }
                for i, y, p, c in zip(self.indices, self.labels, self.predictions, self.confidences)
            ],
            **self.metadata,
        }

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        np.save(directory / "images.npy", self.images.numpy())
        path = directory / "manifest.json"
        path.write_text(json.dumps(self.manifest(), indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, directory) -> "HardExampleSet":
        directory = Path(directory)
        meta = json.loads((directory / "manifest.json").read_text())
        items = meta.pop("items")
        images = torch.from_numpy(np.load(directory / "images.npy"))
        known = ("source_split", "criterion", "threshold", "seed", "shortage")
        return cls(
            images=images,
            labels=torch.tensor([it["label"] for it in items], dtype=torch.long),
            predictions=torch.tensor([it["predicted"] for it in items], dtype=torch.long),
            confidences=torch.tensor([it["confidence"] for it in items], dtype=torch.float32),
            indices=[it["index"] for it in items],
            source_split=meta["source_split"],
            criterion=meta["criterion"],
            threshold=meta["threshold"],
            shortage=meta["shortage"],
            seed=meta["seed"],
            metadata={k: v for k, v in meta.items() if k not in known},
        )


def qualifies(criterion: str, predicted, label, confidence, threshold: float):
    wrong = predicted != label
    # threshold 1 is vacuous even for saturated float32 probabilities
    low = confidence < threshold if threshold < 1.0 else torch.ones_like(wrong)
    if criterion == "misclassified":
        return wrong
    if criterion == "low_confidence":
        return low
    return wrong | low


def mine_hard_examples(
    handle: ClassifierHandle,
    images: torch.Tensor,
    labels: torch.Tensor,
    count: int = 50,
    criterion: str = "union",
    confidence_threshold: float = 0.5,
    source_split: str = "test",
    seed: int = 0,
) -> HardExampleSet:
    """Select up to ``count`` examples that are misclassified and/or have low true-class confidence.

    Ranking is by ascending true-class probability (ties by dataset index). A
    shortfall is not an error: the result carries a ``shortage`` record instead.
    """
    if len(labels) == 0:
        raise ValidationError("dataset is empty")
    if criterion not in CRITERIA:
        raise ValidationError(f"criterion must be one of {CRITERIA}, got {criterion!r}")
    if not 0.0 < confidence_threshold <= 1.0:
        raise ValidationError(f"confidence threshold must be in (0, 1], got {confidence_threshold}")
    if count < 1:
        raise ValidationError("count must be positive")

    probs = handle.predict_batch(images)
    preds = probs.argmax(1)
    conf = probs.gather(1, labels[:, None])[:, 0]
    keep = qualifies(criterion, preds, labels, conf, confidence_threshold)
    candidates = torch.nonzero(keep)[:, 0].numpy()
    # stable sort keeps index order among equal confidences
    order = candidates[np.argsort(conf[candidates].numpy(), kind="stable")]
    chosen = order[:count]

    shortage = None
    if len(chosen) < count:
        shortage = {"requested": count, "found": int(len(chosen))}
        log.warning("hard-example shortage: requested %d, found %d", count, len(chosen))
    idx = torch.as_tensor(chosen, dtype=torch.long)
    result = HardExampleSet(
        images=images[idx].clone(),
        labels=labels[idx].clone(),
        predictions=preds[idx].clone(),
        confidences=conf[idx].clone(),
        indices=[int(i) for i in chosen],
        source_split=source_split,
        criterion=criterion,
        threshold=confidence_threshold,
        shortage=shortage,
        seed=seed,
    )
    if len(result) and len(result.distinct_labels) < 2:
        log.warning("hard-example set spans a single class; fusion needs label diversity")
    return result
