"""Attack evaluation protocols: paired top-k reports, transfer, unseen classes, ablations."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import ProtocolError, ValidationError
from .model_zoo import ClassifierHandle
from .patch_core import Patch, sample_positions
from .trainer import patched_batch, train_patch
from .transforms import TransformConfig, apply_transform, sample_transforms

log = logging.getLogger(__name__)

TOPK = (1, 3, 5)


def topk_hits(logits: torch.Tensor, labels: torch.Tensor, ks=TOPK) -> dict[int, torch.Tensor]:
    """Boolean hit vectors per k. Ranking uses a stable sort so ties favour low indices."""
    order = torch.sort(logits, dim=1, descending=True, stable=True).indices
    out = {}
    for k in ks:
        kk = min(k, logits.shape[1])
        out[k] = (order[:, :kk] == labels[:, None]).any(1)
    return out


@dataclass
class AttackReport:
    patch_id: str
    model_id: str
    split_id: str
    top1: float
    top3: float
    top5: float
    per_class_top1: dict[int, float]
    n_samples: int
    control: dict = field(default_factory=dict)
    draw_log_hash: str = ""
    config: dict = field(default_factory=dict)

    @property
    def macro_top1(self) -> float:
        vals = list(self.per_class_top1.values())
        return float(np.mean(vals)) if vals else float("nan")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_top1"] = {str(k): v for k, v in self.per_class_top1.items()}
        d["macro_top1"] = self.macro_top1
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def csv_rows(self) -> list[dict]:
        rows = [{"which": "adversarial", "top1": self.top1, "top3": self.top3, "top5": self.top5}]
        if self.control:
            rows.append({"which": "white_control", **{k: self.control[k] for k in ("top1", "top3", "top5")}})
        return [{"patch_id": self.patch_id, "model_id": self.model_id, "split_id": self.split_id, **r} for r in rows]

    def save(self, directory, stem: str = "attack_report") -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / f"{stem}.json").write_text(self.to_json())
        write_csv(directory / f"{stem}.csv", self.csv_rows())
        return directory / f"{stem}.json"

    @classmethod
    def from_dict(cls, d: dict) -> "AttackReport":
        d = dict(d)
        d.pop("macro_top1", None)
        d["per_class_top1"] = {int(k): v for k, v in d["per_class_top1"].items()}
        return cls(**d)


def write_csv(path, rows: list[dict]):
    if not rows:
        Path(path).write_text("")
        return
    buf = io.StringIO()
    fields = list(rows[0].keys())
    for r in rows[1:]:
        fields += [k for k in r if k not in fields]
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    Path(path).write_text(buf.getvalue())


def _metrics(logits_list, labels, classes=None):
    logits = torch.cat(logits_list)
    hits = topk_hits(logits, labels)
    per_class = {}
    for c in sorted(set(labels.tolist()) if classes is None else classes):
        sel = labels == c
        if sel.any():
            per_class[int(c)] = float(hits[1][sel].float().mean())
    return {
        "top1": float(hits[1].float().mean()),
        "top3": float(hits[3].float().mean()),
        "top5": float(hits[5].float().mean()),
        "per_class_top1": per_class,
    }


def evaluate_attack(
    handle: ClassifierHandle,
    patch: Patch | None,
    images: torch.Tensor,
    labels: torch.Tensor,
    placement_policy: str = "fixed_center",
    transform_cfg: TransformConfig | None = None,
    seed: int = 0,
    split_id: str = "test",
    control: Patch | None = None,
    batch_size: int = 256,
) -> AttackReport:
    """Top-k accuracy under ``patch`` plus a paired white-patch control.

    The adversarial and control passes share the sample order, the placements
    and the transform draws. ``placement_policy="none"`` (or ``patch=None``)
    evaluates clean images.
    """
    if len(labels) == 0:
        raise ValidationError("evaluation split is empty")
    H, W = handle.input_size
    if patch is not None and tuple(patch.image_size) != (H, W):
        raise ValidationError(f"patch built for {patch.image_size}, model input is {(H, W)}")
    clean = patch is None or placement_policy == "none"
    if control is None and patch is not None:
        control = Patch.white(patch.shape, patch.image_size, area_budget=patch.area_budget)

    rng = np.random.default_rng(seed)
    n = len(labels)
    if clean:
        tops = lefts = np.zeros(n, dtype=np.int64)
    else:
        tops, lefts = sample_positions(rng, n, (H, W), patch.shape, placement_policy)
    draws = sample_transforms(transform_cfg, rng, n) if transform_cfg is not None else None
    draw_log = hashlib.sha256(
        json.dumps(
            {
                "tops": np.asarray(tops).tolist(),
                "lefts": np.asarray(lefts).tolist(),
                "draws": None if draws is None else [d.params() for d in draws],
            }
        ).encode()
    ).hexdigest()[:16]

    def run(p: Patch | None):
        out = []
        pt = None if p is None or clean else p.tensor()
        with torch.no_grad():
            for i in range(0, n, batch_size):
                sl = slice(i, i + batch_size)
                x = images[sl]
                if pt is not None:
                    x = patched_batch(x, pt, tops[sl], lefts[sl])
                if draws is not None:
                    x = apply_transform(draws[sl], x)
                out.append(handle.logits(x))
        return out

    adv = _metrics(run(patch), labels)
    ctrl = _metrics(run(control), labels) if control is not None else dict(adv)
    ctrl["draw_log_hash"] = draw_log
    ctrl["patch_id"] = control.id if control is not None else None
    return AttackReport(
        patch_id=patch.id if patch is not None else "none",
        model_id=handle.model_id,
        split_id=split_id,
        top1=adv["top1"],
        top3=adv["top3"],
        top5=adv["top5"],
        per_class_top1=adv["per_class_top1"],
        n_samples=n,
        control={k: ctrl[k] for k in ("top1", "top3", "top5", "per_class_top1", "draw_log_hash", "patch_id")},
        draw_log_hash=draw_log,
        config={
            "placement_policy": placement_policy,
            "transforms": None if transform_cfg is None else transform_cfg.to_dict(),
            "seed": seed,
        },
    )


@dataclass
class TransferCell:
    patch_name: str
    target_model: str
    white_box: bool
    report: AttackReport


def transfer_matrix(
    patches: dict[str, Patch],
    models: dict[str, ClassifierHandle],
    images: torch.Tensor,
    labels: torch.Tensor,
    seed: int = 0,
    placement_policy: str = "fixed_center",
) -> list[TransferCell]:
    """Evaluate every patch on every model.

    ``patches`` maps a row name to a patch. The model a patch was trained on is
    read from ``patch.metadata["source_model"]``; that cell is flagged white-box.
    """
    if not patches or not models:
        raise ValidationError("need at least one patch and one model")
    cells = []
    for name, patch in patches.items():
        src = patch.metadata.get("source_model")
        for tgt, handle in models.items():
            if tuple(patch.image_size) != tuple(handle.input_size):
                raise ValidationError(
                    f"patch {name} assumes {patch.image_size}, model {tgt} takes {handle.input_size}"
                )
            rep = evaluate_attack(handle, patch, images, labels, placement_policy, seed=seed)
            cells.append(TransferCell(name, tgt, src == tgt, rep))
    return cells


def transfer_rows(cells: Sequence[TransferCell]) -> list[dict]:
    return [
        {
            "patch": c.patch_name,
            "target": c.target_model,
            "white_box": c.white_box,
            "top1": c.report.top1,
            "top3": c.report.top3,
            "top5": c.report.top5,
            "control_top1": c.report.control["top1"],
        }
        for c in cells
    ]


@dataclass
class SplitPlan:
    train_classes: frozenset
    eval_classes: frozenset
    mode: str = "unseen_half"

    def __post_init__(self):
        self.train_classes = frozenset(int(c) for c in self.train_classes)
        self.eval_classes = frozenset(int(c) for c in self.eval_classes)
        if self.mode not in ("all", "unseen_half"):
            raise ValidationError(f"unknown split mode {self.mode!r}")
        if self.mode == "unseen_half" and self.train_classes & self.eval_classes:
            raise ProtocolError(f"train and eval classes overlap: {sorted(self.train_classes & self.eval_classes)}")
        if self.mode == "all" and self.train_classes != self.eval_classes:
            raise ValidationError("mode 'all' trains and evaluates on the same classes")

    @classmethod
    def unseen_half(cls, num_classes: int, seed: int = 0) -> "SplitPlan":
        perm = np.random.default_rng(seed).permutation(num_classes)
        half = num_classes // 2
        return cls(frozenset(perm[:half].tolist()), frozenset(perm[half:].tolist()), "unseen_half")

    @classmethod
    def all_classes(cls, num_classes: int) -> "SplitPlan":
        every = frozenset(range(num_classes))
        return cls(every, every, "all")


def unseen_class_eval(
    handle: ClassifierHandle,
    plan: SplitPlan,
    patch: Patch,
    images: torch.Tensor,
    labels: torch.Tensor,
    seed: int = 0,
    placement_policy: str = "fixed_center",
) -> AttackReport:
    """Evaluate on ``plan.eval_classes`` only, refusing patches trained on any of them."""
    trained = patch.metadata.get("trained_classes")
    if trained is None:
        raise ProtocolError("patch metadata does not record its training classes")
    if plan.mode == "unseen_half":
        leak = set(trained) & plan.eval_classes
        if leak:
            raise ProtocolError(f"patch was trained on evaluation classes {sorted(leak)}")
    sel = torch.isin(labels, torch.tensor(sorted(plan.eval_classes)))
    rep = evaluate_attack(
        handle, patch, images[sel], labels[sel], placement_policy, seed=seed, split_id=f"eval_classes{sorted(plan.eval_classes)}"
    )
    rep.config["plan"] = {"train": sorted(plan.train_classes), "eval": sorted(plan.eval_classes), "mode": plan.mode}
    return rep


def _pick(pool_images, pool_labels, n, rng):
    if n > len(pool_labels):
        raise ValidationError(f"pool has {len(pool_labels)} items, {n} requested")
    idx = torch.as_tensor(np.sort(rng.choice(len(pool_labels), size=n, replace=False)))
    return pool_images[idx], pool_labels[idx]


def _train_eval(handle, x, y, prior, eval_images, eval_labels, seed, train_kwargs, cache):
    """Train a patch on ``(x, y)`` and evaluate it; identical requests are served from ``cache``."""
    key = None
    if cache is not None:
        h = hashlib.sha256(x.numpy().tobytes())
        h.update(y.numpy().tobytes())
        h.update(repr((seed, sorted(train_kwargs.items(), key=lambda kv: kv[0]), prior.id)).encode())
        key = h.hexdigest()
        if key in cache:
            return cache[key]
    run = train_patch(handle, x, y, prior, seed=seed, **train_kwargs)
    result = (run.patch.id, evaluate_attack(handle, run.patch, eval_images, eval_labels, seed=seed))
    if cache is not None:
        cache[key] = result
    return result


def mixture_ablation(
    handle: ClassifierHandle,
    prototype_pool: tuple[torch.Tensor, torch.Tensor],
    image_pool: tuple[torch.Tensor, torch.Tensor],
    ratios: Sequence[float],
    total_n: int,
    prior: Patch,
    eval_images: torch.Tensor,
    eval_labels: torch.Tensor,
    seed: int = 0,
    train_kwargs: dict | None = None,
    cache: dict | None = None,
) -> list[dict]:
    """Train one patch per prototype fraction with a fixed training-set size.

    ``ratios`` are fractions of prototypes (1.0 = prototypes only). Each row has
    the paired top-1 of that patch and its white control. Pass the same
    ``cache`` dict to :func:`data_efficiency` to share identical training runs.
    """
    train_kwargs = dict(train_kwargs or {})
    rows = []
    for ratio in ratios:
        if not 0.0 <= ratio <= 1.0:
            raise ValidationError(f"ratio {ratio} outside [0, 1]")
        n_proto = int(round(ratio * total_n))
        n_img = total_n - n_proto
        rng = np.random.default_rng(seed)
        pi, pl = _pick(*prototype_pool, n_proto, rng)
        ii, il = _pick(*image_pool, n_img, rng)
        x = torch.cat([pi, ii])
        y = torch.cat([pl, il])
        patch_id, rep = _train_eval(handle, x, y, prior, eval_images, eval_labels, seed, train_kwargs, cache)
        rows.append(
            {
                "ratio": ratio,
                "n_prototypes": n_proto,
                "n_images": n_img,
                "top1": rep.top1,
                "control_top1": rep.control["top1"],
                "patch_id": patch_id,
            }
        )
        log.info("mixture %d:%d -> top-1 %.3f", n_proto, n_img, rep.top1)
    return rows


def data_efficiency(
    handle: ClassifierHandle,
    prototype_pool: tuple[torch.Tensor, torch.Tensor],
    image_pool: tuple[torch.Tensor, torch.Tensor],
    n: int,
    prior: Patch,
    eval_images: torch.Tensor,
    eval_labels: torch.Tensor,
    image_multipliers: Sequence[int] = (1, 2),
    seed: int = 0,
    train_kwargs: dict | None = None,
    cache: dict | None = None,
) -> list[dict]:
    """Prototype-only training on ``n`` items against image-only training on ``m * n`` items."""
    train_kwargs = dict(train_kwargs or {})
    settings = [("P", n, prototype_pool)] + [("I", m * n, image_pool) for m in image_multipliers]
    rows = []
    for kind, size, pool in settings:
        x, y = _pick(*pool, size, np.random.default_rng(seed))
        _, rep = _train_eval(handle, x, y, prior, eval_images, eval_labels, seed, train_kwargs, cache)
        rows.append({"setting": f"{kind}{size}", "kind": kind, "n": size, "top1": rep.top1, "control_top1": rep.control["top1"]})
    return rows


def transform_ablation(
    handle: ClassifierHandle,
    images: torch.Tensor,
    labels: torch.Tensor,
    kinds: Sequence[str],
    prior: Patch,
    eval_images: torch.Tensor,
    eval_labels: torch.Tensor,
    seed: int = 0,
    samples_per_step: int = 4,
    train_kwargs: dict | None = None,
    test_transforms: bool = True,
) -> list[dict]:
    """For each kind, train with and without EOT of that kind and test under random warps of it."""
    train_kwargs = dict(train_kwargs or {})
    plain = train_patch(handle, images, labels, prior, transform_cfg=None, seed=seed, **train_kwargs)
    rows = []
    for kind in kinds:
        cfg = TransformConfig.only(kind, samples_per_step=samples_per_step)
        eot = train_patch(handle, images, labels, prior, transform_cfg=cfg, seed=seed, **train_kwargs)
        test_cfg = TransformConfig.only(kind, samples_per_step=1) if test_transforms else None
        with_rep = evaluate_attack(handle, eot.patch, eval_images, eval_labels, transform_cfg=test_cfg, seed=seed)
        without_rep = evaluate_attack(handle, plain.patch, eval_images, eval_labels, transform_cfg=test_cfg, seed=seed)
        rows.append(
            {
                "kind": kind,
                "with_top1": with_rep.top1,
                "without_top1": without_rep.top1,
                "control_top1": with_rep.control["top1"],
                "test_transforms": test_transforms,
            }
        )
        log.info("transform %s: with %.3f without %.3f", kind, with_rep.top1, without_rep.top1)
    return rows


def directional_trend(rows: Sequence[dict], key: str = "top1") -> bool:
    """True if ``key`` is non-decreasing along the rows (logged, not asserted, by callers)."""
    vals = [r[key] for r in rows]
    return all(a <= b for a, b in zip(vals, vals[1:]))

