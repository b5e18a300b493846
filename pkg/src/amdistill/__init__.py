"""Attention-guided masked feature distillation on a synthetic dense task.

The package bundles a float64 tensor/autodiff core, the masking and
channel-clue distillation method, small teacher/student CNNs, a seeded
blob-scene generator, and an experiment harness with a CLI front end.
"""

from .autodiff import Tape, Tensor, backward, no_grad
from .data import BlobScene, gen_dataset, load_dataset, save_dataset, split
from .distill import (
    BinaryMask,
    ChannelClue,
    DistillConfig,
    SpatialAttention,
    apply_mask,
    channel_abs_mean,
    distill_loss,
    basic_feature_loss,
    generate,
    overall_loss,
    random_mask,
    se_clue,
    spatial_attention,
    threshold_mask,
)
from .harness import (
    ExperimentResult,
    ablation_suite,
    distill_student,
    evaluate,
    gradcheck_suite,
    lambda_sweep,
    pretrain_teacher,
)
from .models import ToyDetector, build_model, forward, load_detector, save_detector, task_loss
from .optim import ParamSet, sgd_step

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "no_grad",
    "BlobScene",
    "gen_dataset",
    "load_dataset",
    "save_dataset",
    "split",
    "BinaryMask",
    "ChannelClue",
    "DistillConfig",
    "SpatialAttention",
    "apply_mask",
    "channel_abs_mean",
    "distill_loss",
    "basic_feature_loss",
    "generate",
    "overall_loss",
    "random_mask",
    "se_clue",
    "spatial_attention",
    "threshold_mask",
    "ExperimentResult",
    "ablation_suite",
    "distill_student",
    "evaluate",
    "gradcheck_suite",
    "lambda_sweep",
    "pretrain_teacher",
    "ToyDetector",
    "build_model",
    "forward",
    "load_detector",
    "save_detector",
    "task_loss",
    "ParamSet",
    "sgd_step",
    "__version__",
]
