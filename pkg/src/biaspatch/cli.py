"""Command-line driver.

Usage: ``biaspatch <command> CONFIG [--set key=value ...]`` and
``biaspatch report ARTIFACT_DIR``.

Artifacts live in one directory per experiment: ``--output-dir``, else
``output_dir`` from the config, else ``$BIASPATCH_ARTIFACTS/<name>``, else
``./artifacts/<name>``. Each stage writes its own subdirectory plus a
``_stage.json`` record (stage fingerprint and SHA-256 of every file), and the
top-level ``manifest.json`` collects the records. A stage whose record matches
its fingerprint and whose files are intact is reused, so deleting one output
re-runs only the stages that need it.

Exit codes: 0 success, 2 invalid input or config, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image, PngImagePlugin

from . import __version__
from .boundary_probe import compare_priors, save_comparison
from .config import ExperimentConfig, dump_config, load_config, load_dataset
from .errors import BiasPatchRuntimeError, StageError, ValidationError
from .evaluator import (
    AttackReport,
    SplitPlan,
    data_efficiency,
    evaluate_attack,
    mixture_ablation,
    transfer_matrix,
    transfer_rows,
    transform_ablation,
    unseen_class_eval,
    write_csv,
)
from .hard_mining import HardExampleSet, mine_hard_examples
from .model_zoo import ClassifierHandle, accuracy, load_checkpoint, save_checkpoint, train_classifier
from .patch_core import Patch, load_patch, save_patch
from .plots import bar_chart, topk_bars, training_curve
from .prior_fusion import FusedExample, extract_prior, fuse_prior
from .prototypes import PrototypeSet, generate_prototype_set
from .trainer import train_patch

log = logging.getLogger("biaspatch")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3
ARTIFACT_ENV = "BIASPATCH_ARTIFACTS"
STAGE_RECORD = "_stage.json"
MANIFEST = "manifest.json"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _hash(payload) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")
    return path


def stamp(path: Path, stage_fp: str, config_fp: str) -> None:
    """Write the fingerprints into a JSON object or a PNG text chunk."""
    if path.suffix == ".json":
        data = json.loads(path.read_text())
        if isinstance(data, dict):
            data["stage_fingerprint"] = stage_fp
            data["config_fingerprint"] = config_fp
            _write_json(path, data)
    elif path.suffix == ".png":
        with Image.open(path) as im:
            im.load()
            info = PngImagePlugin.PngInfo()
            info.add_text("stage_fingerprint", stage_fp)
            info.add_text("config_fingerprint", config_fp)
            im.save(path, pnginfo=info)


def read_stamp(path: Path) -> str | None:
    if path.suffix == ".json":
        data = json.loads(path.read_text())
        return data.get("stage_fingerprint") if isinstance(data, dict) else None
    if path.suffix == ".png":
        with Image.open(path) as im:
            return im.text.get("stage_fingerprint") if hasattr(im, "text") else None
    return None


def resolve_output_dir(cfg: ExperimentConfig, override: str | None = None) -> Path:
    env = os.environ.get(ARTIFACT_ENV)
    if override:
        return Path(override)
    if cfg.output_dir:
        out = Path(cfg.output_dir)
        return out if out.is_absolute() or not env else Path(env) / out
    return (Path(env) if env else Path("artifacts")) / cfg.name


class Workspace:
    """The artifact directory of one experiment and the stages that fill it."""

    STAGE_DIRS = {
        "model": "model",
        "mine": "hard_set",
        "fuse": "prior",
        "prototypes": "prototypes",
        "train-patch": "patch",
        "evaluate": "report",
        "probe-boundary": "boundary",
        "transfer": "transfer",
        "unseen": "unseen",
        "ablate-mixture": "ablation_mixture",
        "ablate-transform": "ablation_transform",
    }

    def __init__(self, cfg: ExperimentConfig, root: Path):
        self.cfg = cfg
        self.root = Path(root)
        self._splits = None
        self._label_names = None
        self._handle = None
        self._fps: dict[str, str] = {}

    # data and model ------------------------------------------------------

    def splits(self):
        if self._splits is None:
            self._splits, self._label_names = load_dataset(self.cfg.dataset)
        return self._splits

    def split(self, name: str):
        splits = self.splits()
        if name not in splits:
            raise ValidationError(f"dataset has no {name!r} split; available: {sorted(splits)}")
        return splits[name]

    @property
    def num_classes(self) -> int:
        return self.handle().num_classes

    def checkpoint_path(self) -> Path:
        if self.cfg.model.checkpoint:
            return Path(self.cfg.model.checkpoint)
        return self.root / "model" / "model.pt"

    def handle(self) -> ClassifierHandle:
        if self._handle is None:
            path = self.checkpoint_path()
            if not self.cfg.model.checkpoint and not self.is_fresh("model"):
                raise ValidationError(f"no trained model for this config at {path}; run `biaspatch train-model` first")
            self._handle = load_checkpoint(path)
        return self._handle

    # fingerprints ----------------------------------------------------------

    def fingerprint(self, stage: str) -> str:
        if stage in self._fps:
            return self._fps[stage]
        d = self.cfg.to_dict()
        ev = d["evaluator"]
        deps: dict[str, tuple[dict, tuple[str, ...]]] = {
            "model": ({"dataset": d["dataset"], "model": d["model"]}, ()),
            "mine": ({"dataset": d["dataset"], "hard_mining": d["hard_mining"]}, ("model",)),
            "fuse": ({"prior_fusion": d["prior_fusion"], "patch": d["patch"]}, ("mine",)),
            "prototypes": ({"prototype_gen": d["prototype_gen"]}, ("model",)),
            "train-patch": ({"patch_trainer": d["patch_trainer"], "transforms": d["transforms"]}, ("fuse", "prototypes")),
            "evaluate": (
                {k: ev[k] for k in ("split", "placement_policy", "test_transforms")} | {"transforms": d["transforms"]},
                ("train-patch",),
            ),
            "probe-boundary": ({"boundary_probe": d["boundary_probe"]}, ("fuse",)),
            "transfer": (
                {k: ev[k] for k in ("split", "placement_policy", "transfer_models")} | {"dataset": d["dataset"]},
                ("train-patch",),
            ),
            "unseen": (
                {k: ev[k] for k in ("split", "placement_policy", "unseen_split_seed")}
                | {"patch_trainer": d["patch_trainer"], "transforms": d["transforms"]},
                ("fuse", "prototypes"),
            ),
            "ablate-mixture": (
                {k: ev[k] for k in ("split", "mixture_ratios", "mixture_total", "efficiency_n", "efficiency_multipliers")}
                | {"patch_trainer": d["patch_trainer"], "transforms": d["transforms"], "dataset": d["dataset"]},
                ("fuse", "prototypes"),
            ),
            "ablate-transform": (
                {k: ev[k] for k in ("split", "ablation_kinds")}
                | {"patch_trainer": d["patch_trainer"], "transforms": d["transforms"]},
                ("fuse", "prototypes"),
            ),
        }
        payload, upstream = deps[stage]
        if stage == "model" and self.cfg.model.checkpoint:
            path = self.checkpoint_path()
            if not path.exists():
                raise FileNotFoundError(f"checkpoint not found: {path}")
            payload = {"checkpoint_sha256": _sha256(path)}
        fp = _hash({"stage": stage, "seed": d["seed"], "payload": payload, "upstream": [self.fingerprint(u) for u in upstream]})
        self._fps[stage] = fp
        return fp

    # stage records -----------------------------------------------------------

    def stage_dir(self, stage: str) -> Path:
        return self.root / self.STAGE_DIRS[stage]

    def record(self, stage: str) -> dict | None:
        path = self.stage_dir(stage) / STAGE_RECORD
        return json.loads(path.read_text()) if path.exists() else None

    def is_fresh(self, stage: str) -> bool:
        if stage == "model" and self.cfg.model.checkpoint:
            return True
        rec = self.record(stage)
        if rec is None:
            return False
        if rec.get("stage_fingerprint") != self.fingerprint(stage):
            log.warning("%s: outputs were produced by a different config; recomputing", stage)
            return False
        for rel, digest in rec["files"].items():
            path = self.root / rel
            if not path.exists() or _sha256(path) != digest:
                log.info("%s: %s missing or modified; recomputing", stage, rel)
                return False
        return True

    def finish(self, stage: str, files: list[Path], summary: dict | None = None) -> dict:
        """Stamp outputs, write the stage record and merge it into the manifest."""
        fp = self.fingerprint(stage)
        cfp = self.cfg.fingerprint
        for f in files:
            stamp(f, fp, cfp)
        rec = {
            "stage": stage,
            "stage_fingerprint": fp,
            "config_fingerprint": cfp,
            "files": {str(f.relative_to(self.root)): _sha256(f) for f in sorted(files)},
            "summary": summary or {},
        }
        _write_json(self.stage_dir(stage) / STAGE_RECORD, rec)
        self.update_manifest(stage, rec)
        return rec

    def update_manifest(self, stage: str, rec: dict) -> None:
        path = self.root / MANIFEST
        manifest = json.loads(path.read_text()) if path.exists() else {"stages": {}}
        manifest["experiment"] = self.cfg.name
        manifest["config_fingerprint"] = self.cfg.fingerprint
        manifest["config"] = self.cfg.to_dict()
        manifest["stages"][stage] = {
            "directory": self.STAGE_DIRS[stage],
            "stage_fingerprint": rec["stage_fingerprint"],
            "config_fingerprint": rec["config_fingerprint"],
            "files": sorted(rec["files"]),
        }
        _write_json(path, manifest)
        (self.root / "config.yaml").write_text(dump_config(self.cfg))

    def run(self, stage: str, force: bool = False) -> dict:
        """Run ``stage`` (and any stale upstream stage) unless its outputs are current."""
        if not force and self.is_fresh(stage):
            log.info("%s: up to date", stage)
            return self.record(stage)
        if stage == "model" and self.cfg.model.checkpoint:
            return {}
        fn = getattr(self, "_stage_" + stage.replace("-", "_"))
        torch.manual_seed(self.cfg.seed)
        log.info("%s: running", stage)
        try:
            files, summary = fn()
        except (StageError, KeyboardInterrupt):
            raise
        except Exception as exc:
            raise StageError(stage, exc) from exc
        return self.finish(stage, files, summary)

    # loaders for upstream outputs -------------------------------------------

    def hard_set(self) -> HardExampleSet:
        self.run("mine")
        return HardExampleSet.load(self.stage_dir("mine"))

    def fused(self) -> FusedExample:
        self.run("fuse")
        return FusedExample.load(self.stage_dir("fuse"))

    def prior(self) -> Patch:
        self.run("fuse")
        return load_patch(self.stage_dir("fuse"), "prior")

    def prototypes(self) -> PrototypeSet:
        self.run("prototypes")
        return PrototypeSet.load(self.stage_dir("prototypes"))

    def patch(self) -> Patch:
        self.run("train-patch")
        return load_patch(self.stage_dir("train-patch"), "patch")

    def train_kwargs(self) -> dict:
        t = self.cfg.patch_trainer
        return {
            "epochs": t.epochs,
            "batch_size": t.batch_size,
            "lr": t.lr,
            "weight_decay": t.weight_decay,
            "placement_policy": t.placement_policy,
        }

    def eval_data(self):
        s = self.split(self.cfg.evaluator.split)
        return s.images, s.labels

    # stages ------------------------------------------------------------------

    def _stage_model(self):
        m = self.cfg.model
        train = self.split("train")
        names = self._label_names
        num_classes = len(names) if names else int(train.labels.max()) + 1
        handle = train_classifier(
            train.images,
            train.labels,
            arch=m.arch(num_classes),
            epochs=m.epochs,
            lr=m.lr,
            batch_size=m.batch_size,
            seed=m.seed,
            label_names=names,
            model_id=f"{m.name}_w{m.width}_b{m.n_blocks}_{m.pool}",
        )
        ckpt = save_checkpoint(handle, self.stage_dir("model") / "model.pt")
        test = self.split("test")
        top1 = accuracy(handle, test.images, test.labels)
        metrics = _write_json(self.stage_dir("model") / "metrics.json", {"clean_top1": top1, "n_test": len(test.labels)})
        self._handle = handle
        print(f"clean top-1 on test split: {top1:.4f}")
        return [ckpt, ckpt.with_suffix(".json"), metrics], {"clean_top1": top1}

    def _stage_mine(self):
        h = self.cfg.hard_mining
        data = self.split(h.split)
        hs = mine_hard_examples(
            self.handle(), data.images, data.labels, h.count, h.criterion, h.confidence_threshold, h.split, self.cfg.seed
        )
        out = self.stage_dir("mine")
        hs.save(out)
        summary = {
            "n": len(hs),
            "mean_confidence": float(np.asarray(hs.confidences, dtype=float).mean()) if len(hs) else None,
            "distinct_labels": sorted(hs.distinct_labels),
        }
        print(f"mined {len(hs)} hard examples (mean true-class confidence {summary['mean_confidence']:.3f})")
        return [out / "images.npy", out / "manifest.json"], summary

    def _stage_fuse(self):
        f = self.cfg.prior_fusion
        handle = self.handle()
        fused = fuse_prior(
            self.hard_set(), handle, f.lam, f.epochs, f.batch_size, f.lr, f.mode, f.style_layers, self.cfg.seed, f.weight_decay
        )
        out = self.stage_dir("fuse")
        fused.save(out)
        prior, att = extract_prior(fused, handle, self.cfg.patch.size, f.attention_layer, self.cfg.patch.area_budget)
        prior.id = f"{self.cfg.name}_prior"
        save_patch(prior, out, "prior")
        np.save(out / "attention.npy", att.weights)
        first, last = fused.loss_trace[0][3], fused.loss_trace[-1][3]
        print(f"fused prior: L_f {first:.4g} -> {last:.4g}; crop at {prior.metadata.get('crop_top')},{prior.metadata.get('crop_left')}")
        files = [out / f"fused.{e}" for e in ("png", "npy", "json")] + [out / f"prior.{e}" for e in ("png", "npy", "json")]
        return files + [out / "attention.npy"], {"initial_loss": first, "final_loss": last}

    def _stage_prototypes(self):
        p = self.cfg.prototype_gen
        ps = generate_prototype_set(
            self.handle(), p.per_class, self.cfg.seed, None, p.margin, p.p, p.steps, p.lr, p.retries
        )
        out = self.stage_dir("prototypes")
        ps.save(out)
        conf = [pr.confidence for pr in ps]
        summary = {"n": len(ps), "attempts": ps.attempts, "shortage": {str(k): v for k, v in ps.shortage.items()}, "min_confidence": float(min(conf)) if conf else None}
        print(f"generated {len(ps)} prototypes; shortage {ps.shortage or 'none'}")
        files = sorted(out.glob("*.png")) + [out / "prototypes.npy", out / "manifest.json"]
        return files, summary

    def _stage_train_patch(self):
        handle = self.handle()
        ps = self.prototypes()
        run = train_patch(
            handle,
            ps.images,
            ps.labels,
            self.prior(),
            transform_cfg=self.cfg.transforms.build(),
            seed=self.cfg.seed,
            patch_id=f"{self.cfg.name}_patch",
            **self.train_kwargs(),
        )
        out = self.stage_dir("train-patch")
        run.save(out)
        ep = [m[0] for m in run.epoch_metrics]
        curve = training_curve(ep, [m[1] for m in run.epoch_metrics], [m[2] for m in run.epoch_metrics], out / "training_curve.png")
        last = run.epoch_metrics[-1] if run.epoch_metrics else (0, float("nan"), float("nan"))
        print(f"trained patch: final L_t {last[1]:.4f}, train top-1 {last[2]:.3f}")
        files = [out / f"patch.{e}" for e in ("png", "npy", "json")] + [out / "metrics.jsonl", curve]
        return files, {"final_loss": last[1], "final_train_top1": last[2]}

    def _stage_evaluate(self):
        ev = self.cfg.evaluator
        images, labels = self.eval_data()
        tcfg = None
        if ev.test_transforms and self.cfg.transforms.enabled:
            tcfg = self.cfg.transforms.build()
        rep = evaluate_attack(self.handle(), self.patch(), images, labels, ev.placement_policy, tcfg, self.cfg.seed, ev.split)
        out = self.stage_dir("evaluate")
        rep.save(out)
        png = topk_bars(rep.to_dict(), out / "topk.png")
        print(_topk_table([("adversarial", rep.to_dict()), ("white control", rep.control)]))
        return [out / "attack_report.json", out / "attack_report.csv", png], {
            "top1": rep.top1,
            "control_top1": rep.control["top1"],
        }

    def _prior_inputs(self) -> dict:
        bp = self.cfg.boundary_probe
        image_size = tuple(self.handle().input_size)
        if bp.embedding == "image":
            side = image_size
            fused = self.fused().pixels
        else:
            side = (self.cfg.patch.size, self.cfg.patch.size)
            fused = self.prior()
        budget = 1.0 if bp.embedding == "image" else self.cfg.patch.area_budget
        makers = {
            "fused": lambda: fused,
            "hard_example": lambda: self._hard_probe_inputs(side),
            "gaussian": lambda: Patch.gaussian(side, image_size, seed=self.cfg.seed, area_budget=budget),
            "white": lambda: Patch.white(side, image_size, area_budget=budget),
        }
        return {name: makers[name]() for name in bp.priors}

    def _hard_probe_inputs(self, side) -> torch.Tensor:
        """Every mined hard example, or its centre window on a grey canvas for patch-level probing."""
        images = self.hard_set().images
        if tuple(side) == tuple(images.shape[-2:]):
            return images
        H, W = images.shape[-2:]
        h, w = side
        top, left = (H - h) // 2, (W - w) // 2
        out = torch.full_like(images, 0.5)
        out[:, :, top : top + h, left : left + w] = images[:, :, top : top + h, left : left + w]
        return out

    def _stage_probe_boundary(self):
        bp = self.cfg.boundary_probe
        rows = compare_priors(self.handle(), self._prior_inputs(), bp.alpha, bp.max_steps)
        out = self.stage_dir("probe-boundary")
        save_comparison(rows, out)
        for r in rows:
            print(f"{r['rank']}. {r['prior']:<10} mean steps {r['mean_steps']:.2f} (saturated {r['n_saturated']})")
        files = [out / "prior_comparison.csv", out / "prior_comparison.json", out / "prior_comparison.png"]
        return files, {"ranking": [r["prior"] for r in rows]}

    def _stage_transfer(self):
        ev = self.cfg.evaluator
        handle = self.handle()
        train = self.split("train")
        out = self.stage_dir("transfer")
        models = {handle.model_id: handle}
        files = []
        for tm in ev.transfer_models:
            path = out / "models" / f"{tm.name}.pt"
            arch = {"name": "small_cnn", "num_classes": handle.num_classes, "width": tm.width, "n_blocks": tm.n_blocks, "pool": tm.pool}
            other = train_classifier(
                train.images, train.labels, arch=arch, epochs=tm.epochs, seed=tm.seed,
                label_names=handle.label_names, model_id=tm.name,
            )
            save_checkpoint(other, path)
            files += [path, path.with_suffix(".json")]
            models[tm.name] = other
        images, labels = self.eval_data()
        cells = transfer_matrix({"patch": self.patch()}, models, images, labels, self.cfg.seed, ev.placement_policy)
        rows = transfer_rows(cells)
        write_csv(out / "transfer.csv", rows)
        _write_json(out / "transfer.json", {"rows": rows})
        for r in rows:
            kind = "white-box" if r["white_box"] else "black-box"
            print(f"{r['target']:<24} {kind}: top-1 {r['top1']:.3f} (white control {r['control_top1']:.3f})")
        return files + [out / "transfer.csv", out / "transfer.json"], {"rows": rows}

    def _stage_unseen(self):
        ev = self.cfg.evaluator
        handle = self.handle()
        plan = SplitPlan.unseen_half(handle.num_classes, ev.unseen_split_seed)
        ps = self.prototypes().restrict(plan.train_classes)
        run = train_patch(
            handle, ps.images, ps.labels, self.prior(), transform_cfg=self.cfg.transforms.build(),
            seed=self.cfg.seed, patch_id=f"{self.cfg.name}_unseen_patch", **self.train_kwargs(),
        )
        out = self.stage_dir("unseen")
        save_patch(run.patch, out, "patch")
        images, labels = self.eval_data()
        rep = unseen_class_eval(handle, plan, run.patch, images, labels, self.cfg.seed, ev.placement_policy)
        rep.save(out, "unseen_report")
        ratio = rep.top1 / rep.control["top1"] if rep.control["top1"] else float("nan")
        print(
            f"train classes {sorted(plan.train_classes)}, unseen {sorted(plan.eval_classes)}: "
            f"top-1 {rep.top1:.3f} vs white control {rep.control['top1']:.3f} (ratio {ratio:.3f})"
        )
        files = [out / f"patch.{e}" for e in ("png", "npy", "json")] + [out / "unseen_report.json", out / "unseen_report.csv"]
        return files, {"top1": rep.top1, "control_top1": rep.control["top1"], "ratio": ratio}

    def _stage_ablate_mixture(self):
        ev = self.cfg.evaluator
        handle = self.handle()
        ps = self.prototypes()
        train = self.split("train")
        images, labels = self.eval_data()
        common = dict(
            train_kwargs={**self.train_kwargs(), "transform_cfg": self.cfg.transforms.build()},
            seed=self.cfg.seed,
            cache={},
        )
        mix = mixture_ablation(
            handle, (ps.images, ps.labels), (train.images, train.labels), ev.mixture_ratios, ev.mixture_total,
            self.prior(), images, labels, **common,
        )
        eff = data_efficiency(
            handle, (ps.images, ps.labels), (train.images, train.labels), ev.efficiency_n, self.prior(), images, labels,
            image_multipliers=ev.efficiency_multipliers, **common,
        )
        out = self.stage_dir("ablate-mixture")
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "mixture.csv", mix)
        write_csv(out / "efficiency.csv", eff)
        _write_json(out / "ablation.json", {"mixture": mix, "efficiency": eff})
        bar_chart([f"{r['n_prototypes']}:{r['n_images']}" for r in mix], [r["top1"] for r in mix], out / "mixture.png",
                  ylabel="top-1 under patch", title="Prototypes : images")
        for r in mix:
            print(f"{r['n_prototypes']:>5} prototypes : {r['n_images']:>5} images -> top-1 {r['top1']:.3f}")
        for r in eff:
            print(f"{r['setting']:<8} -> top-1 {r['top1']:.3f}")
        files = [out / "mixture.csv", out / "efficiency.csv", out / "ablation.json", out / "mixture.png"]
        return files, {"mixture": mix, "efficiency": eff}

    def _stage_ablate_transform(self):
        ev = self.cfg.evaluator
        images, labels = self.eval_data()
        ps = self.prototypes()
        rows = transform_ablation(
            self.handle(), ps.images, ps.labels, ev.ablation_kinds, self.prior(), images, labels,
            seed=self.cfg.seed, samples_per_step=self.cfg.transforms.samples_per_step, train_kwargs=self.train_kwargs(),
        )
        out = self.stage_dir("ablate-transform")
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "transform.csv", rows)
        _write_json(out / "transform.json", {"rows": rows})
        for r in rows:
            print(f"{r['kind']:<10} with EOT {r['with_top1']:.3f}  without {r['without_top1']:.3f}")
        return [out / "transform.csv", out / "transform.json"], {"rows": rows}


PIPELINE = ("mine", "fuse", "prototypes", "train-patch", "evaluate", "probe-boundary")


def run_pipeline(ws: Workspace) -> Path:
    ws.handle()
    for stage in PIPELINE:
        ws.run(stage)
    return ws.root / MANIFEST


# report ------------------------------------------------------------------------


def _topk_table(rows) -> str:
    lines = [f"{'':<16}{'top-1':>8}{'top-3':>8}{'top-5':>8}"]
    for name, d in rows:
        lines.append(f"{name:<16}{d['top1']:>8.3f}{d['top3']:>8.3f}{d['top5']:>8.3f}")
    return "\n".join(lines)


def validate_manifest(root: Path) -> dict:
    """Load the manifest and check every listed artifact exists and carries its stage fingerprint."""
    path = root / MANIFEST
    if not path.exists():
        raise ValidationError(f"no {MANIFEST} in {root}; is this an artifact directory?")
    manifest = json.loads(path.read_text())
    for stage, entry in manifest.get("stages", {}).items():
        for rel in entry["files"]:
            f = root / rel
            if not f.exists():
                raise ValidationError(f"{stage}: listed artifact {rel} is missing")
            got = read_stamp(f)
            if got is not None and got != entry["stage_fingerprint"]:
                raise ValidationError(
                    f"{stage}: {rel} carries fingerprint {got}, manifest expects {entry['stage_fingerprint']}"
                )
    return manifest


def build_report(root: Path) -> str:
    manifest = validate_manifest(root)
    stages = manifest.get("stages", {})
    if not stages:
        raise ValidationError(f"manifest in {root} lists no completed stages")
    out = root / "summary"
    out.mkdir(exist_ok=True)
    lines = [f"experiment {manifest.get('experiment')} (config {manifest.get('config_fingerprint')})", ""]

    if "model" in stages:
        m = json.loads((root / "model" / "metrics.json").read_text())
        lines += [f"clean top-1: {m['clean_top1']:.4f}", ""]
    if "evaluate" in stages:
        rep = AttackReport.from_dict(
            {k: v for k, v in json.loads((root / "report" / "attack_report.json").read_text()).items() if "fingerprint" not in k}
        )
        lines += ["white-box attack", _topk_table([("adversarial", rep.to_dict()), ("white control", rep.control)]), ""]
        topk_bars(rep.to_dict(), out / "topk.png")
        lines.append("per-class top-1: " + ", ".join(f"{k}:{v:.2f}" for k, v in sorted(rep.per_class_top1.items())))
        lines.append("")
    if "train-patch" in stages:
        rows = [json.loads(line) for line in (root / "patch" / "metrics.jsonl").read_text().splitlines() if line]
        training_curve([r["epoch"] for r in rows], [r["loss"] for r in rows], [r["train_top1"] for r in rows], out / "training_curve.png")
        if rows:
            lines += [f"patch training: L_t {rows[0]['loss']:.4f} -> {rows[-1]['loss']:.4f} over {len(rows)} epochs", ""]
    if "probe-boundary" in stages:
        rows = json.loads((root / "boundary" / "prior_comparison.json").read_text())["rows"]
        bar_chart([r["prior"] for r in rows], [r["mean_steps"] for r in rows], out / "prior_comparison.png",
                  ylabel="mean PGD steps to flip", title="Decision-boundary distance by prior")
        lines.append("decision-boundary distance (mean steps)")
        lines += [f"  {r['rank']}. {r['prior']:<10}{r['mean_steps']:>9.2f}" for r in rows]
        lines.append("")
    if "transfer" in stages:
        rows = json.loads((root / "transfer" / "transfer.json").read_text())["rows"]
        lines.append("transfer (top-1 / white control)")
        lines += [
            f"  {r['target']:<24}{'white' if r['white_box'] else 'black':>6}-box {r['top1']:.3f} / {r['control_top1']:.3f}"
            for r in rows
        ]
        lines.append("")
    if "unseen" in stages:
        rep = json.loads((root / "unseen" / "unseen_report.json").read_text())
        lines += ["unseen classes", _topk_table([("adversarial", rep), ("white control", rep["control"])]), ""]
    if "ablate-mixture" in stages:
        ab = json.loads((root / "ablation_mixture" / "ablation.json").read_text())
        lines.append("prototype : image mixture (top-1)")
        lines += [f"  {r['n_prototypes']}:{r['n_images']}  {r['top1']:.3f}" for r in ab["mixture"]]
        lines += [f"  {r['setting']}  {r['top1']:.3f}" for r in ab["efficiency"]]
        lines.append("")
    if "ablate-transform" in stages:
        rows = json.loads((root / "ablation_transform" / "transform.json").read_text())["rows"]
        lines.append("transform ablation (top-1 with / without EOT)")
        lines += [f"  {r['kind']:<10}{r['with_top1']:.3f} / {r['without_top1']:.3f}" for r in rows]
        lines.append("")
    text = "\n".join(lines).rstrip() + "\n"
    (out / "summary.txt").write_text(text)
    return text


# argument parsing ------------------------------------------------------------------

STAGE_COMMANDS = {
    "train-model": "model",
    "mine": "mine",
    "fuse": "fuse",
    "prototypes": "prototypes",
    "train-patch": "train-patch",
    "evaluate": "evaluate",
    "transfer": "transfer",
    "unseen": "unseen",
    "ablate-mixture": "ablate-mixture",
    "ablate-transform": "ablate-transform",
    "probe-boundary": "probe-boundary",
}

HELP = {
    "train-model": "train the built-in classifier and print its clean top-1",
    "mine": "select hard examples from the held-out split",
    "fuse": "fuse hard examples into one image and crop the patch prior",
    "prototypes": "synthesise class prototypes",
    "train-patch": "train the adversarial patch on the prototypes",
    "evaluate": "top-k accuracy under the patch against a white-patch control",
    "transfer": "evaluate the patch on other architectures",
    "unseen": "train on half the classes, evaluate on the other half",
    "ablate-mixture": "prototype/image mixture and data-efficiency runs",
    "ablate-transform": "train with and without each transform kind",
    "probe-boundary": "decision-boundary distance of the fused prior vs baselines",
    "run-pipeline": "mine, fuse, prototypes, train-patch, evaluate, probe-boundary",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="biaspatch", description="Bias-based universal adversarial patches.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in list(STAGE_COMMANDS) + ["run-pipeline"]:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("config", help="experiment config (YAML)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key, e.g. --set patch_trainer.lr=0.05 (repeatable)")
        p.add_argument("--output-dir", help=f"artifact directory (default: config output_dir, ${ARTIFACT_ENV}/<name>)")
        p.add_argument("--force", action="store_true", help="recompute the stage even if its outputs are current")
        p.add_argument("-v", "--verbose", action="store_true")
    p = sub.add_parser("report", help="summarise an artifact directory and emit plots")
    p.add_argument("artifact_dir")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.command == "report":
            print(build_report(Path(args.artifact_dir)), end="")
            return EXIT_OK
        cfg = load_config(args.config, args.overrides)
        ws = Workspace(cfg, resolve_output_dir(cfg, args.output_dir))
        ws.root.mkdir(parents=True, exist_ok=True)
        if args.command == "run-pipeline":
            path = run_pipeline(ws)
            print(f"manifest: {path}")
        else:
            ws.run(STAGE_COMMANDS[args.command], force=args.force)
            print(f"artifacts: {ws.stage_dir(STAGE_COMMANDS[args.command])}")
        return EXIT_OK
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION if isinstance(exc.cause, (ValidationError, FileNotFoundError)) else EXIT_RUNTIME
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (BiasPatchRuntimeError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
