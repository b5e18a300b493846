"""Experiment orchestration: teacher pretraining, student distillation,
ablations, threshold sweeps and the gradient verification suite.

All randomness flows through named splitmix64 streams derived from the run
seed, so every experiment is reproducible bit for bit and independent
experiments can run on worker threads without interacting.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from . import data as datamod
from .autodiff import Tape, Tensor, backward, no_grad
from .distill import (
    DistillConfig,
    GenBlockParams,
    adaptation,
    apply_mask,
    basic_feature_loss,
    build_adaptation,
    build_gen_block,
    build_se,
    channel_abs_mean,
    distill_loss,
    generate,
    overall_loss,
    random_mask_with_counts,
    se_clue,
    spatial_attention,
    threshold_mask,
)
from .models import ToyDetector, build_model, forward, freeze, save_detector, task_loss
from .optim import ParamSet, sgd_step
from .rng import SplitMix64, derive_stream

__all__ = [
    "TrainingAborted",
    "TeacherNotConverged",
    "ExperimentResult",
    "DistillHeads",
    "default_dataset",
    "cache_teacher_features",
    "pretrain_teacher",
    "train_plain",
    "distill_student",
    "evaluate",
    "ablation_suite",
    "lambda_sweep",
    "masked_fraction_for_threshold",
    "gradcheck_suite",
    "numerical_gradient",
    "GradcheckReport",
    "OpCheck",
    "write_manifest",
    "sha256_file",
    "ABLATION_VARIANTS",
    "CORE_VARIANTS",
    "SWEEP_THRESHOLDS",
    "FULLSCALE_REFERENCE",
]

DATASET_SEED = 11
DATASET_COUNT = 160
TRAIN_FRACTION = 0.8
BATCH_SIZE = 16
MOMENTUM = 0.9
WEIGHT_DECAY = 1e-4

# mAP figures from the original full-scale study, kept as directional
# expectations for the desk-scale analogs.
FULLSCALE_REFERENCE = {
    "full": 41.3,
    "without_adaptive_mask": 41.0,
    "without_channel_clue": 41.2,
    "gen_dense3x3_x2": 41.3,
    "gen_dense3x3_x1": 41.2,
    "gen_mbconv_dw5": 41.0,
    "clue_after": 42.4,
    "clue_within": 42.2,
    "best_mask_threshold": 1.0,
}

# Full-scale hyper-parameter sets; exposed for reference, not desk defaults.
FULLSCALE_HYPERS = {
    "one_stage": {"alpha": 2.5e-7, "mask_threshold": 1.0, "temperature": 0.5},
    "two_stage": {"alpha": 4e-6, "mask_threshold": 1.2, "temperature": 0.5},
}

SWEEP_THRESHOLDS = (0.6, 0.8, 1.0, 1.2, 1.4)

ABLATION_VARIANTS: dict[str, dict] = {
    "full": {},
    "ada_mask_only": {"ada_channel": False},
    "ada_channel_only": {"mask_policy": "random"},
    "random_mask": {"mask_policy": "random", "ada_channel": False},
    "no_distill": {"alpha": 0.0, "mask_policy": "none"},
    "gen_dense3x3_x1": {"gen_block": "dense3x3_x1"},
    "gen_mbconv_dw5": {"gen_block": "mbconv_dw5"},
    "clue_within": {"clue_location": "within"},
}
CORE_VARIANTS = ("full", "ada_mask_only", "ada_channel_only", "random_mask", "no_distill")

ABLATION_COLUMNS = (
    "variant",
    "seed",
    "f1",
    "accuracy",
    "precision",
    "recall",
    "recon_mse",
    "masked_fraction",
    "final_task_loss",
    "final_distill_loss",
    "resolved_alpha",
)

SWEEP_COLUMNS = (
    "mask_threshold",
    "masked_fraction",
    "median_f1",
    "median_accuracy",
    "median_recon_mse",
    "is_reference_optimum",
)


class TrainingAborted(RuntimeError):
    """Raised when a loss stops being finite mid-run."""


class TeacherNotConverged(RuntimeError):
    """Raised when the pretrained teacher misses the accuracy precondition."""


@dataclass
class ExperimentResult:
    """Per-epoch losses and final held-out metrics for one training run."""

    variant: str
    seed: int
    config: DistillConfig
    resolved_alpha: float
    task_losses: list[float]
    distill_losses: list[float]
    overall_losses: list[float]
    masked_fractions: list[float]
    accuracy: float
    precision: float
    recall: float
    f1: float
    recon_mse: float
    wall_time_s: float
    student: ToyDetector = field(repr=False)

    def validate(self) -> None:
        n = len(self.task_losses)
        if not (len(self.distill_losses) == len(self.overall_losses) == len(self.masked_fractions) == n):
            raise ValueError("epoch series lengths disagree")
        scalars = [self.accuracy, self.precision, self.recall, self.f1, self.recon_mse, self.resolved_alpha]
        for series in (self.task_losses, self.distill_losses, self.overall_losses, self.masked_fractions):
            scalars.extend(series)
        if not np.all(np.isfinite(scalars)):
            raise ValueError(f"non-finite value in result for {self.variant} seed {self.seed}")

    def csv_row(self) -> list:
        return [
            self.variant,
            self.seed,
            self.f1,
            self.accuracy,
            self.precision,
            self.recall,
            self.recon_mse,
            float(np.mean(self.masked_fractions)),
            self.task_losses[-1],
            self.distill_losses[-1],
            self.resolved_alpha,
        ]


@dataclass
class DistillHeads:
    """Trainable modules around the student: adaptation plus generation."""

    adapt_w: Tensor
    gen: GenBlockParams

    def trainable_params(self, config: DistillConfig) -> ParamSet:
        params = ParamSet({"adapt.w": self.adapt_w})
        if config.mask_policy != "none":
            for name, tensor in self.gen.weights.items():
                params.add(f"gen.{name}", tensor)
            if config.ada_channel and self.gen.se is not None:
                for name, tensor in self.gen.se.named().items():
                    params.add(f"gen.{name}", tensor)
        return params


def build_heads(config: DistillConfig, student_channels: int, teacher_channels: int, seed: int) -> DistillHeads:
    """Adaptation, generation block and (if enabled) SE path for one run.

    One stream feeds the builders in a fixed order so that toggling the SE
    path never shifts the other initializations.
    """
    rng = derive_stream(seed, "heads")
    adapt_w = build_adaptation(student_channels, teacher_channels, rng)
    gen = build_gen_block(teacher_channels, config.gen_block, rng)
    if config.ada_channel:
        gen.se = build_se(teacher_channels, config.se_reduction, rng, config.se_hidden_relu)
    return DistillHeads(adapt_w=adapt_w, gen=gen)


def default_dataset(seed: int = DATASET_SEED, count: int = DATASET_COUNT) -> list[datamod.BlobScene]:
    return datamod.gen_dataset(seed, count)


def cache_teacher_features(teacher: ToyDetector, scenes, batch_size: int = BATCH_SIZE) -> np.ndarray:
    """Per-scene neck features of the frozen teacher, computed once."""
    chunks = []
    with no_grad():
        for start in range(0, len(scenes), batch_size):
            images = datamod.stack_images(scenes, range(start, min(start + batch_size, len(scenes))))
            feature, _ = forward(teacher, images)
            chunks.append(feature.data)
    return np.concatenate(chunks, axis=0)


# ---------------------------------------------------------------------------
# training loops

def _check_finite(value: float, label: str, variant: str, epoch: int, step: int, last: dict) -> None:
    if not np.isfinite(value):
        raise TrainingAborted(
            f"non-finite {label} ({value}) in '{variant}' at epoch {epoch} step {step}; "
            f"last losses: {last}"
        )


def _train_task(
    model: ToyDetector,
    train_scenes,
    epochs: int,
    lr: float,
    order: SplitMix64,
    batch_size: int,
    label: str,
    epoch_callback: Optional[Callable[[int, ToyDetector], None]] = None,
) -> list[float]:
    """Plain task training; returns per-epoch mean task loss."""
    n_batches = len(train_scenes) // batch_size
    if n_batches < 1:
        raise ValueError(f"{label}: need at least one full batch, got {len(train_scenes)} scenes")
    losses = []
    last = {"task": float("nan")}
    for epoch in range(epochs):
        perm = order.permutation(len(train_scenes))
        total = 0.0
        for b in range(n_batches):
            idx = perm[b * batch_size : (b + 1) * batch_size]
            images = datamod.stack_images(train_scenes, idx)
            labels = datamod.stack_labels(train_scenes, idx)
            with Tape():
                _, logits = forward(model, images)
                loss = task_loss(logits, labels)
                value = loss.item()
                _check_finite(value, "task loss", label, epoch, b, last)
                backward(loss)
            sgd_step(model.params, lr, MOMENTUM, WEIGHT_DECAY)
            last["task"] = value
            total += value
        losses.append(total / n_batches)
        if epoch_callback is not None:
            epoch_callback(epoch, model)
    return losses


def pretrain_teacher(
    seed: int,
    epochs: int = 30,
    lr: float = 0.05,
    *,
    dataset=None,
    batch_size: int = BATCH_SIZE,
    min_accuracy: float = 0.9,
    out_path: Optional[str] = None,
) -> ToyDetector:
    """Train and freeze a teacher; abort if held-out accuracy stays below 0.9."""
    scenes = dataset if dataset is not None else default_dataset()
    train_scenes, test_scenes = datamod.split(scenes, TRAIN_FRACTION)
    teacher = build_model("teacher", seed)
    _train_task(teacher, train_scenes, epochs, lr, derive_stream(seed, "teacher-order"), batch_size, "teacher")
    metrics = evaluate(teacher, test_scenes, batch_size)
    if metrics["accuracy"] < min_accuracy:
        raise TeacherNotConverged(
            f"teacher accuracy {metrics['accuracy']:.3f} < {min_accuracy} after {epochs} epochs (seed {seed})"
        )
    freeze(teacher)
    if out_path is not None:
        save_detector(out_path, teacher)
    return teacher


def train_plain(
    seed: int,
    epochs: int = 20,
    lr: float = 0.02,
    *,
    dataset=None,
    batch_size: int = BATCH_SIZE,
    epoch_callback: Optional[Callable[[int, ToyDetector], None]] = None,
) -> ToyDetector:
    """Distillation-free student training; the alpha=0 reference trajectory."""
    scenes = dataset if dataset is not None else default_dataset()
    train_scenes, _ = datamod.split(scenes, TRAIN_FRACTION)
    student = build_model("student", seed)
    _train_task(
        student, train_scenes, epochs, lr, derive_stream(seed, "order"), batch_size, "plain", epoch_callback
    )
    return student


def _masked_reconstruction(
    config: DistillConfig,
    heads: DistillHeads,
    teacher_feat: Tensor,
    student_feat: Tensor,
    mask_stream: SplitMix64,
) -> tuple[Tensor, float]:
    """Generated teacher-shaped feature and the batch masked fraction."""
    adapted = adaptation(student_feat, heads.adapt_w)
    attn = spatial_attention(channel_abs_mean(teacher_feat), config.temperature)
    base = threshold_mask(attn, config.mask_threshold)
    if config.mask_policy == "adaptive":
        mask = base
    else:
        n, _, h, w = base.mask.shape
        if config.random_ratio is None:
            counts = base.zero_counts()
        else:
            counts = [int(round(config.random_ratio * h * w))] * n
        mask = random_mask_with_counts(counts, h, w, mask_stream.next_u64())
    masked = apply_mask(adapted, mask)
    clue = se_clue(teacher_feat, heads.gen.se) if config.ada_channel else None
    recon = generate(masked, heads.gen, clue, config.clue_location)
    return recon, mask.zero_fraction()


def _distill_term(
    config: DistillConfig,
    heads: DistillHeads,
    teacher_feat: Tensor,
    student_feat: Tensor,
    mask_stream: SplitMix64,
) -> tuple[Tensor, float]:
    if config.mask_policy == "none":
        return basic_feature_loss(teacher_feat, student_feat, heads.adapt_w), 0.0
    recon, fraction = _masked_reconstruction(config, heads, teacher_feat, student_feat, mask_stream)
    return distill_loss(teacher_feat, recon), fraction


def _resolve_alpha(
    config: DistillConfig,
    heads: DistillHeads,
    student: ToyDetector,
    train_scenes,
    teacher_feats: np.ndarray,
    batch_size: int,
    seed: int,
) -> float:
    """Auto-balance alpha so the distillation term matches the task loss on
    the first batch; explicit alphas pass through unchanged."""
    if config.alpha is not None:
        return float(config.alpha)
    idx = list(range(batch_size))
    probe = derive_stream(seed, "alpha-probe")
    with no_grad():
        images = datamod.stack_images(train_scenes, idx)
        labels = datamod.stack_labels(train_scenes, idx)
        feat_s, logits = forward(student, images)
        l_task = task_loss(logits, labels).item()
        l_fea, _ = _distill_term(config, heads, Tensor(teacher_feats[idx]), feat_s, probe)
        l_fea_val = l_fea.item()
    if l_fea_val <= 0 or not np.isfinite(l_fea_val):
        return 1.0
    return l_task / l_fea_val


def distill_student(
    teacher: ToyDetector,
    config: DistillConfig,
    seed: int,
    epochs: int = 20,
    lr: float = 0.02,
    *,
    dataset=None,
    batch_size: int = BATCH_SIZE,
    variant_label: str = "distill",
    epoch_callback: Optional[Callable[[int, ToyDetector], None]] = None,
) -> ExperimentResult:
    """Train a student against a frozen teacher under one configuration.

    With alpha=0 the distillation branch never enters the graph or the
    optimizer, so the parameter trajectory is exactly the plain-training
    one; the distillation loss is still reported for the record.
    """
    start = time.perf_counter()
    scenes = dataset if dataset is not None else default_dataset()
    train_scenes, test_scenes = datamod.split(scenes, TRAIN_FRACTION)
    n_batches = len(train_scenes) // batch_size
    if n_batches < 1:
        raise ValueError(f"need at least one full batch, got {len(train_scenes)} train scenes")

    teacher_feats = cache_teacher_features(teacher, train_scenes, batch_size)
    student = build_model("student", seed)
    heads = build_heads(config, student.width, teacher.width, seed)
    alpha = _resolve_alpha(config, heads, student, train_scenes, teacher_feats, batch_size, seed)

    trainable = ParamSet()
    trainable.adopt(student.params, "student")
    if alpha > 0:
        trainable.adopt(heads.trainable_params(config), "heads")

    order = derive_stream(seed, "order")
    mask_stream = derive_stream(seed, "mask")

    epoch_task, epoch_distill, epoch_overall, epoch_fraction = [], [], [], []
    last = {"task": float("nan"), "distill": float("nan"), "overall": float("nan")}
    for epoch in range(epochs):
        perm = order.permutation(len(train_scenes))
        sums = np.zeros(4)
        for b in range(n_batches):
            idx = perm[b * batch_size : (b + 1) * batch_size]
            images = datamod.stack_images(train_scenes, idx)
            labels = datamod.stack_labels(train_scenes, idx)
            teacher_feat = Tensor(teacher_feats[idx])
            with Tape():
                feat_s, logits = forward(student, images)
                l_task = task_loss(logits, labels)
                if alpha > 0:
                    l_fea, fraction = _distill_term(config, heads, teacher_feat, feat_s, mask_stream)
                    total = overall_loss(l_fea, l_task, alpha)
                    fea_value = l_fea.item()
                else:
                    with no_grad():
                        l_fea, fraction = _distill_term(config, heads, teacher_feat, feat_s, mask_stream)
                    total = l_task
                    fea_value = l_fea.item()
                task_value, total_value = l_task.item(), total.item()
                for loss_name, value in (("task", task_value), ("distill", fea_value), ("overall", total_value)):
                    _check_finite(value, f"{loss_name} loss", variant_label, epoch, b, last)
                backward(total)
            sgd_step(trainable, lr, MOMENTUM, WEIGHT_DECAY)
            last = {"task": task_value, "distill": fea_value, "overall": total_value}
            sums += (task_value, fea_value, total_value, fraction)
        means = sums / n_batches
        epoch_task.append(means[0])
        epoch_distill.append(means[1])
        epoch_overall.append(means[2])
        epoch_fraction.append(means[3])
        if epoch_callback is not None:
            epoch_callback(epoch, student)

    metrics = evaluate(student, test_scenes, batch_size)
    recon_mse = _reconstruction_mse(teacher, student, heads, config, test_scenes, batch_size, seed)
    result = ExperimentResult(
        variant=variant_label,
        seed=seed,
        config=config,
        resolved_alpha=alpha,
        task_losses=epoch_task,
        distill_losses=epoch_distill,
        overall_losses=epoch_overall,
        masked_fractions=epoch_fraction,
        accuracy=metrics["accuracy"],
        precision=metrics["precision"],
        recall=metrics["recall"],
        f1=metrics["f1"],
        recon_mse=recon_mse,
        wall_time_s=time.perf_counter() - start,
        student=student,
    )
    result.validate()
    return result


def _reconstruction_mse(
    teacher: ToyDetector,
    student: ToyDetector,
    heads: DistillHeads,
    config: DistillConfig,
    scenes,
    batch_size: int,
    seed: int,
) -> float:
    """Mean squared error per element between teacher features and the
    distillation pipeline's reconstruction, on held-out scenes."""
    mask_stream = derive_stream(seed, "recon-mask")
    total_sq = 0.0
    total_n = 0
    with no_grad():
        for start in range(0, len(scenes), batch_size):
            idx = range(start, min(start + batch_size, len(scenes)))
            images = datamod.stack_images(scenes, idx)
            feat_t, _ = forward(teacher, images)
            feat_s, _ = forward(student, images)
            if config.mask_policy == "none":
                recon = adaptation(feat_s, heads.adapt_w)
            else:
                recon, _ = _masked_reconstruction(config, heads, feat_t, feat_s, mask_stream)
            diff = feat_t.data - recon.data
            total_sq += float((diff * diff).sum())
            total_n += diff.size
    return total_sq / total_n


def evaluate(model: ToyDetector, scenes, batch_size: int = BATCH_SIZE) -> dict[str, float]:
    """Per-cell accuracy, precision, recall and F1 at logit threshold 0."""
    tp = fp = tn = fn = 0
    with no_grad():
        for start in range(0, len(scenes), batch_size):
            idx = range(start, min(start + batch_size, len(scenes)))
            images = datamod.stack_images(scenes, idx)
            labels = datamod.stack_labels(scenes, idx).data > 0.5
            _, logits = forward(model, images)
            preds = logits.data > 0.0
            tp += int(np.sum(preds & labels))
            fp += int(np.sum(preds & ~labels))
            tn += int(np.sum(~preds & ~labels))
            fn += int(np.sum(~preds & labels))
    total = tp + fp + tn + fn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {
        "accuracy": (tp + tn) / total if total else 0.0,
        "precision": precision,
        "recall": recall,
        "f1": f1,
    }


# ---------------------------------------------------------------------------
# suites

def _suite_threads() -> int:
    raw = os.environ.get("AMD_THREADS", "1")
    try:
        threads = int(raw)
    except ValueError as exc:
        raise ValueError(f"AMD_THREADS must be an integer, got '{raw}'") from exc
    return max(1, threads)


def _run_cells(cells: list[tuple[object, Callable[[], ExperimentResult]]]) -> list[tuple[object, ExperimentResult]]:
    threads = _suite_threads()
    if threads == 1:
        return [(key, fn()) for key, fn in cells]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [(key, pool.submit(fn)) for key, fn in cells]
        return [(key, fut.result()) for key, fut in futures]


def ablation_suite(
    teacher: ToyDetector,
    seeds: list[int],
    *,
    dataset=None,
    epochs: int = 20,
    lr: float = 0.02,
    batch_size: int = BATCH_SIZE,
    base_config: Optional[DistillConfig] = None,
    variants: Optional[list[str]] = None,
    csv_path: Optional[str] = None,
    manifest_path: Optional[str] = None,
    input_hashes: Optional[dict[str, str]] = None,
) -> list[ExperimentResult]:
    """Component/variant grid over seeds, emitted as a deterministic CSV.

    Rows mirror the variant tables: component toggles, generation-block
    alternatives and the clue-location alternative.
    """
    if len(seeds) < 5:
        raise ValueError(f"ablation_suite needs >= 5 seeds, got {len(seeds)}")
    base = base_config if base_config is not None else DistillConfig()
    names = list(variants) if variants is not None else list(ABLATION_VARIANTS)
    unknown = [n for n in names if n not in ABLATION_VARIANTS]
    if unknown:
        raise ValueError(f"unknown ablation variants {unknown}")
    scenes = dataset if dataset is not None else default_dataset()

    cells = []
    for name in names:
        config = replace(base, **ABLATION_VARIANTS[name])
        for seed in seeds:
            cells.append(
                (
                    (names.index(name), seed),
                    lambda c=config, s=seed, n=name: distill_student(
                        teacher, c, s, epochs, lr, dataset=scenes, batch_size=batch_size, variant_label=n
                    ),
                )
            )
    results = [res for _, res in sorted(_run_cells(cells), key=lambda kv: kv[0])]

    if csv_path is not None:
        _write_csv(csv_path, ABLATION_COLUMNS, [r.csv_row() for r in results])
    if manifest_path is not None:
        write_manifest(
            manifest_path,
            {
                "command": "ablate",
                "seeds": list(seeds),
                "variants": names,
                "epochs": epochs,
                "lr": lr,
                "batch_size": batch_size,
                "base_config": _config_dict(base),
                "reference_fullscale_map": FULLSCALE_REFERENCE,
                "input_hashes": input_hashes or {},
            },
        )
    return results


def masked_fraction_for_threshold(teacher_feats: np.ndarray, temperature: float, threshold: float) -> float:
    """Mean masked fraction over a fixed feature set, no training involved."""
    attn = spatial_attention(channel_abs_mean(Tensor(teacher_feats)), temperature)
    return threshold_mask(attn, threshold).zero_fraction()


def lambda_sweep(
    teacher: ToyDetector,
    thresholds: list[float],
    seeds: list[int],
    *,
    dataset=None,
    epochs: int = 20,
    lr: float = 0.02,
    batch_size: int = BATCH_SIZE,
    base_config: Optional[DistillConfig] = None,
    csv_path: Optional[str] = None,
    manifest_path: Optional[str] = None,
    input_hashes: Optional[dict[str, str]] = None,
) -> list[dict]:
    """Mask-threshold sweep: per threshold, median metrics over seeds plus
    the deterministic masked fraction of the training features."""
    if any(t <= 0 for t in thresholds):
        raise ValueError(f"thresholds must be > 0, got {thresholds}")
    base = base_config if base_config is not None else DistillConfig()
    scenes = dataset if dataset is not None else default_dataset()
    train_scenes, _ = datamod.split(scenes, TRAIN_FRACTION)
    teacher_feats = cache_teacher_features(teacher, train_scenes, batch_size)

    cells = []
    ordered = sorted(thresholds)
    for ti, threshold in enumerate(ordered):
        config = replace(base, mask_threshold=threshold)
        for seed in seeds:
            cells.append(
                (
                    (ti, seed),
                    lambda c=config, s=seed, t=threshold: distill_student(
                        teacher, c, s, epochs, lr, dataset=scenes, batch_size=batch_size,
                        variant_label=f"threshold_{t}",
                    ),
                )
            )
    by_threshold: dict[int, list[ExperimentResult]] = {}
    for (ti, _), res in sorted(_run_cells(cells), key=lambda kv: kv[0]):
        by_threshold.setdefault(ti, []).append(res)

    rows = []
    for ti, threshold in enumerate(ordered):
        runs = by_threshold[ti]
        rows.append(
            {
                "mask_threshold": threshold,
                "masked_fraction": masked_fraction_for_threshold(teacher_feats, base.temperature, threshold),
                "median_f1": float(np.median([r.f1 for r in runs])),
                "median_accuracy": float(np.median([r.accuracy for r in runs])),
                "median_recon_mse": float(np.median([r.recon_mse for r in runs])),
                "is_reference_optimum": threshold == FULLSCALE_REFERENCE["best_mask_threshold"],
            }
        )

    if csv_path is not None:
        _write_csv(csv_path, SWEEP_COLUMNS, [[row[c] for c in SWEEP_COLUMNS] for row in rows])
    if manifest_path is not None:
        write_manifest(
            manifest_path,
            {
                "command": "sweep",
                "seeds": list(seeds),
                "thresholds": ordered,
                "epochs": epochs,
                "lr": lr,
                "batch_size": batch_size,
                "base_config": _config_dict(base),
                "reference_fullscale_map": FULLSCALE_REFERENCE,
                "input_hashes": input_hashes or {},
            },
        )
    return rows


# ---------------------------------------------------------------------------
# gradient verification

@dataclass
class OpCheck:
    name: str
    max_rel_err: float
    ok: bool


@dataclass
class GradcheckReport:
    tolerance: float
    checks: list[OpCheck]

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    def failures(self) -> list[str]:
        return [c.name for c in self.checks if not c.ok]

    def format(self) -> str:
        lines = [
            f"{'PASS' if c.ok else 'FAIL'}  {c.name:<24} max rel err {c.max_rel_err:.3e}"
            for c in self.checks
        ]
        lines.append(f"gradcheck: {'PASS' if self.ok else 'FAIL (' + ', '.join(self.failures()) + ')'}")
        return "\n".join(lines)


def numerical_gradient(loss_fn: Callable[[], Tensor], tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar-valued closure w.r.t. a tensor."""
    flat = tensor.data.reshape(-1)
    grad = np.empty_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            grad[i] = (up - down) / (2.0 * h)
    return grad.reshape(tensor.data.shape)


def _max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-4)
    return float((np.abs(analytic - numeric) / denom).max())


def _uniform(rng: SplitMix64, shape: tuple[int, ...], lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    n = int(np.prod(shape))
    return (lo + (hi - lo) * rng.uniform_array(n)).reshape(shape)


def _gradcheck_cases() -> list[tuple[str, Callable]]:
    """Builders returning (loss_fn, {name: tensor}) per differentiable op."""

    def tensor(rng, shape, nudge=False):
        vals = _uniform(rng, shape)
        if nudge:
            vals = vals + 0.25 * np.sign(vals)
        return Tensor(vals, requires_grad=True)

    def sse_against(rng, out_fn, shape):
        target = Tensor(_uniform(rng, shape))

        def loss_fn():
            return ad.sum_squared_error(out_fn(), target)

        return loss_fn

    def case_conv2d(rng):
        x = tensor(rng, (2, 3, 4, 4))
        w = tensor(rng, (2, 3, 3, 3))
        b = tensor(rng, (2,))
        loss = sse_against(rng, lambda: ad.conv2d(x, w, b, padding=1), (2, 2, 4, 4))
        return loss, {"input": x, "weight": w, "bias": b}

    def case_depthwise(rng):
        x = tensor(rng, (1, 2, 5, 5))
        w = tensor(rng, (2, 1, 5, 5))
        loss = sse_against(rng, lambda: ad.depthwise_conv2d(x, w, padding=2), (1, 2, 5, 5))
        return loss, {"input": x, "weight": w}

    def case_linear(rng):
        x = tensor(rng, (3, 4))
        w = tensor(rng, (2, 4))
        b = tensor(rng, (2,))
        loss = sse_against(rng, lambda: ad.linear(x, w, b), (3, 2))
        return loss, {"input": x, "weight": w, "bias": b}

    def case_relu(rng):
        x = tensor(rng, (2, 3, 4, 4), nudge=True)
        loss = sse_against(rng, lambda: ad.relu(x), (2, 3, 4, 4))
        return loss, {"input": x}

    def case_sigmoid(rng):
        x = tensor(rng, (3, 5))
        loss = sse_against(rng, lambda: ad.sigmoid(x), (3, 5))
        return loss, {"input": x}

    def case_softmax(rng):
        x = tensor(rng, (3, 5))
        loss = sse_against(rng, lambda: ad.softmax_temp(x, 0.7), (3, 5))
        return loss, {"input": x}

    def case_gap(rng):
        x = tensor(rng, (2, 3, 4, 4))
        loss = sse_against(rng, lambda: ad.global_avg_pool(x), (2, 3))
        return loss, {"input": x}

    def case_pool(rng):
        x = tensor(rng, (2, 3, 4, 4))
        loss = sse_against(rng, lambda: ad.avg_pool2x2(x), (2, 3, 2, 2))
        return loss, {"input": x}

    def case_hadamard_channel(rng):
        a = tensor(rng, (2, 3, 4, 4))
        b = tensor(rng, (2, 3))
        loss = sse_against(rng, lambda: ad.hadamard(a, b), (2, 3, 4, 4))
        return loss, {"a": a, "b": b}

    def case_hadamard_spatial(rng):
        a = tensor(rng, (2, 3, 4, 4))
        b = tensor(rng, (2, 1, 4, 4))
        loss = sse_against(rng, lambda: ad.hadamard(a, b), (2, 3, 4, 4))
        return loss, {"a": a, "b": b}

    def case_add_mul_scale(rng):
        a = tensor(rng, (3, 4))
        b = tensor(rng, (3, 4))
        loss = sse_against(rng, lambda: ad.scale(ad.add(ad.mul(a, b), a), 1.7), (3, 4))
        return loss, {"a": a, "b": b}

    def case_sum_all(rng):
        x = tensor(rng, (2, 3, 2, 2))

        def loss_fn():
            folded = ad.reshape(ad.mul(x, x), (6, 4))
            return ad.sum_squared_error(ad.sum_all(folded), Tensor(np.asarray(3.0)))

        return loss_fn, {"input": x}

    def case_sse(rng):
        a = tensor(rng, (2, 3, 3, 3))
        b = tensor(rng, (2, 3, 3, 3))

        def loss_fn():
            return ad.sum_squared_error(a, b)

        return loss_fn, {"a": a, "b": b}

    def case_bce(rng):
        z = tensor(rng, (2, 1, 4, 4))
        y = Tensor((_uniform(rng, (2, 1, 4, 4)) > 0).astype(np.float64))

        def loss_fn():
            return ad.bce_with_logits(z, y)

        return loss_fn, {"logits": z}

    def case_se_clue(rng):
        feat = Tensor(_uniform(rng, (2, 4, 3, 3)))
        se = build_se(4, 2, rng)
        target = Tensor(_uniform(rng, (2, 4)))

        def loss_fn():
            return ad.sum_squared_error(se_clue(feat, se).clue, target)

        return loss_fn, dict(se.named())

    def case_generate(rng):
        gen = build_gen_block(3, "dense3x3_x2", rng)
        se = build_se(3, 2, rng)
        gen.se = se
        x = tensor(rng, (2, 3, 4, 4))
        clue_src = Tensor(_uniform(rng, (2, 3, 4, 4)))
        target = Tensor(_uniform(rng, (2, 3, 4, 4)))

        def loss_fn():
            clue = se_clue(clue_src, se)
            return ad.sum_squared_error(generate(x, gen, clue, "within"), target)

        tensors = {"input": x}
        tensors.update(gen.named())
        return loss_fn, tensors

    def case_generate_mbconv(rng):
        gen = build_gen_block(2, "mbconv_dw5", rng)
        x = tensor(rng, (1, 2, 5, 5))
        target = Tensor(_uniform(rng, (1, 2, 5, 5)))

        def loss_fn():
            return ad.sum_squared_error(generate(x, gen, None, "after"), target)

        tensors = {"input": x}
        tensors.update(gen.named())
        return loss_fn, tensors

    def case_end_to_end(rng):
        teacher = freeze(build_model("teacher", 71, width=4))
        student = build_model("student", 72, width=2)
        config = DistillConfig(alpha=0.5, seed=73)
        heads = build_heads(config, 2, 4, 73)
        images = Tensor(_uniform(rng, (1, 3, 24, 24), 0.0, 1.0))
        labels = Tensor((_uniform(rng, (1, 1, 6, 6)) > 0).astype(np.float64))
        mask_stream = derive_stream(73, "mask")

        def loss_fn():
            feat_t, _ = forward(teacher, images)
            feat_s, logits = forward(student, images)
            l_task = task_loss(logits, labels)
            l_fea, _ = _distill_term(config, heads, feat_t, feat_s, mask_stream)
            return overall_loss(l_fea, l_task, 0.5)

        tensors = {}
        for name, t in student.params.items():
            tensors[f"student.{name}"] = t
        tensors["adapt.w"] = heads.adapt_w
        for name, t in heads.gen.named().items():
            tensors[f"gen.{name}"] = t
        # Nudge every parameter off its init so no preactivation sits exactly
        # on a ReLU kink (zero biases plus zeroed masked windows would).
        for t in tensors.values():
            t.data = t.data + _uniform(rng, t.data.shape, -0.05, 0.05)
        return loss_fn, tensors

    return [
        ("conv2d", case_conv2d),
        ("depthwise_conv2d", case_depthwise),
        ("linear", case_linear),
        ("relu", case_relu),
        ("sigmoid", case_sigmoid),
        ("softmax_temp", case_softmax),
        ("global_avg_pool", case_gap),
        ("avg_pool2x2", case_pool),
        ("hadamard_channel", case_hadamard_channel),
        ("hadamard_spatial", case_hadamard_spatial),
        ("add_mul_scale", case_add_mul_scale),
        ("sum_all", case_sum_all),
        ("sum_squared_error", case_sse),
        ("bce_with_logits", case_bce),
        ("se_clue", case_se_clue),
        ("generation_block", case_generate),
        ("generation_mbconv", case_generate_mbconv),
        ("end_to_end", case_end_to_end),
    ]


def gradcheck_suite(corrupt: Optional[str] = None, tolerance: float = 1e-4) -> GradcheckReport:
    """Compare analytic gradients against central finite differences for
    every differentiable op and the full combined-loss graph.

    ``corrupt`` deliberately perturbs one op's analytic gradient so tests
    can confirm that failures are reported by name.
    """
    checks = []
    for name, builder in _gradcheck_cases():
        rng = derive_stream(20240601, f"gradcheck-{name}")
        loss_fn, tensors = builder(rng)
        with Tape():
            loss = loss_fn()
            backward(loss)
        worst = 0.0
        for t in tensors.values():
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            if corrupt == name:
                analytic = analytic * 1.01 + 1e-3
            numeric = numerical_gradient(loss_fn, t)
            worst = max(worst, _max_rel_err(analytic, numeric))
            t.grad = None
        checks.append(OpCheck(name=name, max_rel_err=worst, ok=worst < tolerance))
    return GradcheckReport(tolerance=tolerance, checks=checks)


# ---------------------------------------------------------------------------
# reporting plumbing

def _config_dict(config: DistillConfig) -> dict:
    return {
        "alpha": config.alpha,
        "mask_threshold": config.mask_threshold,
        "temperature": config.temperature,
        "mask_policy": config.mask_policy,
        "random_ratio": config.random_ratio,
        "ada_channel": config.ada_channel,
        "gen_block": config.gen_block,
        "clue_location": config.clue_location,
        "se_reduction": config.se_reduction,
        "se_hidden_relu": config.se_hidden_relu,
        "seed": config.seed,
    }


def _write_csv(path: str, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        writer.writerows(rows)


def write_manifest(path: str, payload: dict) -> None:
    """JSON run manifest; the timestamp is the only run-varying field."""
    from . import __version__

    body = {"timestamp": datetime.now(timezone.utc).isoformat(), "package_version": __version__}
    body.update(payload)
    with open(path, "w") as fh:
        json.dump(body, fh, indent=2, sort_keys=True)
        fh.write("\n")


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()
