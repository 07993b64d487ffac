"""Universal adversarial patches from textural priors and class prototypes.

Stage one fuses hard examples into a texture-rich image and crops a patch
prior where the classifier's attention is highest. Stage two trains the patch
on synthesised class prototypes under random warps. The evaluation tools
measure top-k accuracy against a paired white patch, transfer, unseen-class
generalisation, ablations and decision-boundary distance.
"""

__version__ = "0.1.0"

import types as _types

from .boundary_probe import BoundaryReport, boundary_distance, compare_priors
from .config import ExperimentConfig, load_config
from .errors import (
    BiasPatchRuntimeError,
    CheckpointError,
    ConfigError,
    DatasetMissingError,
    InputShapeError,
    OptimizationError,
    PlacementError,
    PrototypeRejectedError,
    ProtocolError,
    StageError,
    TrainingError,
    ValidationError,
)
from .evaluator import AttackReport, SplitPlan, evaluate_attack, transfer_matrix, unseen_class_eval
from .hard_mining import HardExampleSet, mine_hard_examples
from .model_zoo import ClassifierHandle, SmallCNN, load_checkpoint, save_checkpoint, train_classifier
from .patch_core import Patch, Placement, Provenance, apply_patch, sample_placement
from .prior_fusion import FusedExample, extract_prior, fuse_prior, gram_matrix, style_loss, uncertainty_loss
from .prototypes import Prototype, PrototypeSet, generate_prototype, generate_prototype_set, margin_loss
from .trainer import TrainRun, adversarial_loss, train_patch
from .transforms import TransformConfig, TransformInstance, apply_transform, sample_transform

__all__ = sorted(n for n, v in globals().items() if not n.startswith("_") and not isinstance(v, _types.ModuleType))
