"""Experiment configuration: a YAML tree mapped onto nested dataclasses.

Unknown keys are rejected with their dotted path. ``fingerprint`` is a stable
hash of the canonical JSON form; per-stage fingerprints hash only the sections
a stage reads plus the fingerprints of the stages it consumes.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from .data import LABEL_NAMES, ToyRetail, make_toy_retail
from .errors import ConfigError, DatasetMissingError
from .transforms import KINDS, TransformConfig


@dataclass
class DatasetConfig:
    kind: str = "toy_retail"
    seed: int = 0
    image_size: int = 64
    n_train: int = 3000
    n_test: int = 1000
    n_val: int = 500
    path: str | None = None

    def validate(self):
        if self.kind not in ("toy_retail", "npz"):
            raise ConfigError(f"dataset.kind must be 'toy_retail' or 'npz', got {self.kind!r}")
        if self.kind == "npz" and not self.path:
            raise ConfigError("dataset.path is required when dataset.kind is 'npz'")


@dataclass
class ModelConfig:
    name: str = "small_cnn"
    width: int = 16
    n_blocks: int = 3
    pool: str = "max"
    epochs: int = 6
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0
    checkpoint: str | None = None

    def arch(self, num_classes: int) -> dict:
        return {"name": self.name, "num_classes": num_classes, "width": self.width, "n_blocks": self.n_blocks, "pool": self.pool}


@dataclass
class HardMiningConfig:
    count: int = 50
    criterion: str = "union"
    confidence_threshold: float = 0.5
    split: str = "val"


@dataclass
class PatchConfig:
    size: int = 6
    area_budget: float = 0.01


@dataclass
class PriorFusionConfig:
    lam: float = 1.0
    epochs: int = 50
    batch_size: int = 10
    lr: float = 0.01
    weight_decay: float = 1e-4
    mode: str = "neg_entropy"
    style_layers: list[str] | None = None
    attention_layer: str | None = None


@dataclass
class PrototypeConfig:
    per_class: int = 15
    margin: float = 10.0
    p: int = 1
    steps: int = 500
    lr: float = 0.05
    retries: int = 5


@dataclass
class TransformsConfig:
    enabled: list[str] = field(default_factory=lambda: list(KINDS))
    rotation_range: list[float] = field(default_factory=lambda: [-30.0, 30.0])
    distortion_range: list[float] = field(default_factory=lambda: [0.0, 0.1])
    affine_range: list[float] = field(default_factory=lambda: [0.0, 4.0])
    samples_per_step: int = 4
    allow_out_of_range: bool = False

    def build(self) -> TransformConfig | None:
        if not self.enabled:
            return None
        return TransformConfig(
            rotation_range=tuple(self.rotation_range),
            distortion_range=tuple(self.distortion_range),
            affine_range=tuple(self.affine_range),
            enabled=frozenset(self.enabled),
            samples_per_step=self.samples_per_step,
            allow_out_of_range=self.allow_out_of_range,
        )


@dataclass
class PatchTrainerConfig:
    epochs: int = 50
    batch_size: int = 8
    lr: float = 0.01
    weight_decay: float = 1e-4
    placement_policy: str = "uniform_random"


@dataclass
class TransferModelConfig:
    name: str = "cnn_b"
    width: int = 24
    n_blocks: int = 3
    pool: str = "max"
    epochs: int = 6
    seed: int = 1


@dataclass
class EvaluatorConfig:
    split: str = "test"
    placement_policy: str = "fixed_center"
    test_transforms: bool = False
    unseen_split_seed: int = 0
    mixture_ratios: list[float] = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    mixture_total: int = 150
    efficiency_n: int = 150
    efficiency_multipliers: list[int] = field(default_factory=lambda: [1, 2])
    ablation_kinds: list[str] = field(default_factory=lambda: ["rotation", "affine", "distortion"])
    transfer_models: list[TransferModelConfig] = field(default_factory=lambda: [TransferModelConfig()])


PRIOR_NAMES = ("fused", "hard_example", "gaussian", "white")


@dataclass
class BoundaryProbeConfig:
    alpha: float = 0.01
    max_steps: int = 500
    priors: list[str] = field(default_factory=lambda: list(PRIOR_NAMES))
    embedding: str = "image"

    def validate(self):
        if self.embedding not in ("image", "patch"):
            raise ConfigError(f"boundary_probe.embedding must be 'image' or 'patch', got {self.embedding!r}")
        unknown = set(self.priors) - set(PRIOR_NAMES)
        if unknown:
            raise ConfigError(f"unknown boundary_probe.priors {sorted(unknown)}")


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    output_dir: str | None = None
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    patch: PatchConfig = field(default_factory=PatchConfig)
    hard_mining: HardMiningConfig = field(default_factory=HardMiningConfig)
    prior_fusion: PriorFusionConfig = field(default_factory=PriorFusionConfig)
    prototype_gen: PrototypeConfig = field(default_factory=PrototypeConfig)
    transforms: TransformsConfig = field(default_factory=TransformsConfig)
    patch_trainer: PatchTrainerConfig = field(default_factory=PatchTrainerConfig)
    evaluator: EvaluatorConfig = field(default_factory=EvaluatorConfig)
    boundary_probe: BoundaryProbeConfig = field(default_factory=BoundaryProbeConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def canonical(self) -> str:
        """Canonical JSON of everything that affects results (``output_dir`` does not)."""
        d = self.to_dict()
        d.pop("output_dir")
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def validate(self) -> "ExperimentConfig":
        self.dataset.validate()
        self.boundary_probe.validate()
        if self.patch.size < 1:
            raise ConfigError("patch.size must be positive")
        if self.hard_mining.split not in ("train", "test", "val"):
            raise ConfigError("hard_mining.split must be one of train, test, val")
        if self.evaluator.split not in ("train", "test", "val"):
            raise ConfigError("evaluator.split must be one of train, test, val")
        try:
            self.transforms.build()
            for kind in self.evaluator.ablation_kinds:
                TransformConfig.only(kind)
        except Exception as exc:
            raise ConfigError(f"transforms: {exc}") from exc
        return self


def _is_dataclass_type(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def _build(cls, data, path: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown config key(s): {', '.join(where + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        tp = hints[name]
        sub = f"{path}.{name}" if path else name
        if _is_dataclass_type(tp):
            kwargs[name] = _build(tp, value, sub)
            continue
        args = typing.get_args(tp)
        if typing.get_origin(tp) is list and args and _is_dataclass_type(args[0]):
            if not isinstance(value, list):
                raise ConfigError(f"{sub} must be a list")
            kwargs[name] = [_build(args[0], v, f"{sub}[{i}]") for i, v in enumerate(value)]
            continue
        kwargs[name] = _coerce(value, tp, sub)
    return cls(**kwargs)


def _coerce(value, tp, path):
    """Light type checking; YAML already produces the right scalar types."""
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if value is None:
        if type(None) in args:
            return None
        raise ConfigError(f"{path} may not be null")
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path} must be a list")
        return [_coerce(v, args[0], f"{path}[]") for v in value] if args else value
    if tp is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if tp is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if tp is bool and isinstance(value, bool):
        return value
    if tp is str and isinstance(value, str):
        return value
    raise ConfigError(f"{path}: expected {getattr(tp, '__name__', tp)}, got {value!r}")


def _set_dotted(tree: dict, key: str, value):
    parts = key.split(".")
    node = tree
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key}: {part} is not a section")
    node[parts[-1]] = value


def parse_override(text: str) -> tuple[str, object]:
    """``a.b=value`` with the value parsed as YAML (so ``0.1``, ``[1, 2]``, ``null`` work)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        return key.strip(), yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {text!r}: {exc}") from exc


def config_from_dict(data: dict | None, overrides=()) -> ExperimentConfig:
    tree = json.loads(json.dumps(data or {}))
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        _set_dotted(tree, key, value)
    return _build(ExperimentConfig, tree, "").validate()


def load_config(path, overrides=()) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    return config_from_dict(data, overrides)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


NPZ_INSTRUCTIONS = """\
dataset file {path} not found.
Create it with arrays x_train, y_train, x_test, y_test (and optionally x_val, y_val):
images as uint8 or float in [0, 1], shaped (N, H, W, 3) or (N, 3, H, W); labels as integers.
For example, from Python:
    numpy.savez("{path}", x_train=..., y_train=..., x_test=..., y_test=...)
Or switch to the built-in fixture with dataset.kind=toy_retail."""


def _npz_images(arr: np.ndarray) -> torch.Tensor:
    arr = np.asarray(arr)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    arr = arr.astype(np.float32)
    if arr.ndim != 4:
        raise ConfigError(f"dataset images must be 4-D, got shape {arr.shape}")
    if arr.shape[-1] == 3:
        arr = arr.transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(np.clip(arr, 0.0, 1.0)))


def load_dataset(cfg: DatasetConfig) -> tuple[dict[str, ToyRetail], list[str]]:
    """Splits by name plus label names."""
    if cfg.kind == "toy_retail":
        splits = make_toy_retail(cfg.seed, cfg.image_size, cfg.n_train, cfg.n_test, cfg.n_val)
        return splits, list(LABEL_NAMES)
    path = Path(cfg.path)
    if not path.exists():
        raise DatasetMissingError(NPZ_INSTRUCTIONS.format(path=path))
    with np.load(path) as z:
        splits = {}
        for name in ("train", "test", "val"):
            if f"x_{name}" in z:
                splits[name] = ToyRetail(_npz_images(z[f"x_{name}"]), torch.from_numpy(z[f"y_{name}"].astype(np.int64)), name)
        names = [str(s) for s in z["label_names"]] if "label_names" in z else []
    for required in ("train", "test"):
        if required not in splits:
            raise ConfigError(f"{path} lacks x_{required}/y_{required}")
    if not names:
        names = [str(i) for i in range(int(max(int(s.labels.max()) for s in splits.values())) + 1)]
    return splits, names
