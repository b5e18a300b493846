"""Command-line front end.

All numeric hyper-parameters live in a single JSON config file so that run
manifests stay complete; flags only select commands and files. Exit codes:
0 success, 1 usage or config error, 2 runtime failure.
"""

from __future__ import annotations

import dataclasses
import json
import os
import sys
from typing import Optional

import click
import numpy as np

from . import data as datamod
from . import harness
from .autodiff import no_grad
from .distill import DistillConfig, channel_abs_mean, spatial_attention, threshold_mask
from .harness import TeacherNotConverged, TrainingAborted, sha256_file
from .models import ToyDetector, forward, load_detector

__all__ = ["RunConfig", "ConfigError", "main", "cli", "write_pgm"]


class ConfigError(Exception):
    """Malformed or incomplete run configuration."""


@dataclasses.dataclass
class RunConfig:
    """JSON-backed run configuration; unknown keys are rejected."""

    alpha: Optional[float] = None
    mask_threshold: float = 1.0
    temperature: float = 0.5
    mask_policy: str = "adaptive"
    random_ratio: Optional[float] = None
    ada_channel: bool = True
    gen_block: str = "dense3x3_x2"
    clue_location: str = "after"
    se_reduction: int = 4
    se_hidden_relu: bool = True
    seed: int = 0
    teacher_weights: Optional[str] = None
    dataset: Optional[str] = None
    dataset_seed: int = harness.DATASET_SEED
    dataset_count: int = harness.DATASET_COUNT
    train_fraction: float = harness.TRAIN_FRACTION
    epochs: int = 20
    lr: float = 0.02
    batch_size: int = 16
    teacher_epochs: int = 30
    teacher_lr: float = 0.05

    @classmethod
    def load(cls, path: Optional[str]) -> "RunConfig":
        if path is None:
            return cls()
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        for key in raw:
            if key not in known:
                raise ConfigError(f"unknown config key '{key}' in {path}")
        try:
            config = cls(**raw)
            config.distill_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config in {path}: {exc}") from exc
        return config

    def distill_config(self) -> DistillConfig:
        return DistillConfig(
            alpha=self.alpha,
            mask_threshold=self.mask_threshold,
            temperature=self.temperature,
            mask_policy=self.mask_policy,
            random_ratio=self.random_ratio,
            ada_channel=self.ada_channel,
            gen_block=self.gen_block,
            clue_location=self.clue_location,
            se_reduction=self.se_reduction,
            se_hidden_relu=self.se_hidden_relu,
            seed=self.seed,
        )

    def load_scenes(self) -> list:
        if self.dataset is not None:
            if not os.path.exists(self.dataset):
                raise ConfigError(f"dataset file not found: {self.dataset}")
            return datamod.load_dataset(self.dataset)
        return datamod.gen_dataset(self.dataset_seed, self.dataset_count)

    def load_teacher(self) -> ToyDetector:
        if self.teacher_weights is None:
            raise ConfigError("config key 'teacher_weights' is required for this command")
        if not os.path.exists(self.teacher_weights):
            raise ConfigError(f"teacher weights file not found: {self.teacher_weights}")
        teacher = load_detector(self.teacher_weights, role="teacher")
        for _, tensor in teacher.params.items():
            tensor.requires_grad = False
        return teacher

    def input_hashes(self) -> dict[str, str]:
        hashes = {}
        if self.teacher_weights and os.path.exists(self.teacher_weights):
            hashes["teacher_weights"] = sha256_file(self.teacher_weights)
        if self.dataset and os.path.exists(self.dataset):
            hashes["dataset"] = sha256_file(self.dataset)
        return hashes


def write_pgm(path: str, values: np.ndarray) -> None:
    """8-bit binary (P5) grayscale image."""
    arr = np.asarray(values, dtype=np.uint8)
    if arr.ndim != 2:
        raise ValueError(f"PGM payload must be 2-D, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def _attention_to_u8(attn: np.ndarray) -> np.ndarray:
    lo, hi = float(attn.min()), float(attn.max())
    if hi > lo:
        return np.round((attn - lo) / (hi - lo) * 255.0).astype(np.uint8)
    return np.full(attn.shape, 128, dtype=np.uint8)


def _parse_float_list(raw: str, flag: str) -> list[float]:
    try:
        values = [float(part) for part in raw.split(",") if part.strip()]
    except ValueError as exc:
        raise ConfigError(f"{flag} must be a comma-separated list of numbers, got '{raw}'") from exc
    if not values:
        raise ConfigError(f"{flag} must not be empty")
    return values


def _parse_int_list(raw: str, flag: str) -> list[int]:
    return [int(v) for v in _parse_float_list(raw, flag)]


_DEFAULTS_HELP = "Config defaults: " + ", ".join(
    f"{f.name}={f.default!r}" for f in dataclasses.fields(RunConfig)
)


@click.group(epilog=_DEFAULTS_HELP)
def cli():
    """Masked-feature distillation experiments on a synthetic dense task.

    Commands read a JSON config file (see the epilog for keys and
    defaults); unknown keys are rejected. Suite parallelism is capped by
    the AMD_THREADS environment variable (default 1).
    """


@cli.command()
@click.option("--seed", type=int, required=True, help="Teacher init/order seed.")
@click.option("--out", "out_path", type=click.Path(), required=True, help="Weight file to write.")
@click.option("--config", "config_path", type=click.Path(), default=None, help="JSON run config.")
def pretrain(seed: int, out_path: str, config_path: Optional[str]):
    """Pretrain and freeze a teacher, then save its weights."""
    rc = RunConfig.load(config_path)
    scenes = rc.load_scenes()
    teacher = harness.pretrain_teacher(
        seed, rc.teacher_epochs, rc.teacher_lr, dataset=scenes, batch_size=rc.batch_size, out_path=out_path
    )
    metrics = harness.evaluate(teacher, datamod.split(scenes, rc.train_fraction)[1], rc.batch_size)
    click.echo(f"teacher saved to {out_path} (accuracy {metrics['accuracy']:.3f}, f1 {metrics['f1']:.3f})")


@cli.command()
@click.option("--config", "config_path", type=click.Path(), required=True, help="JSON run config.")
@click.option("--out", "out_dir", type=click.Path(), required=True, help="Output directory.")
def distill(config_path: str, out_dir: str):
    """Run one distillation experiment and write its result and manifest."""
    rc = RunConfig.load(config_path)
    teacher = rc.load_teacher()
    scenes = rc.load_scenes()
    result = harness.distill_student(
        teacher, rc.distill_config(), rc.seed, rc.epochs, rc.lr, dataset=scenes, batch_size=rc.batch_size
    )
    os.makedirs(out_dir, exist_ok=True)
    payload = {
        "variant": result.variant,
        "seed": result.seed,
        "resolved_alpha": result.resolved_alpha,
        "task_losses": result.task_losses,
        "distill_losses": result.distill_losses,
        "overall_losses": result.overall_losses,
        "masked_fractions": result.masked_fractions,
        "accuracy": result.accuracy,
        "precision": result.precision,
        "recall": result.recall,
        "f1": result.f1,
        "recon_mse": result.recon_mse,
    }
    with open(os.path.join(out_dir, "result.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    harness.write_manifest(
        os.path.join(out_dir, "manifest.json"),
        {"command": "distill", "config": dataclasses.asdict(rc), "input_hashes": rc.input_hashes()},
    )
    click.echo(f"distilled: f1 {result.f1:.3f}, recon mse {result.recon_mse:.5f} -> {out_dir}")


@cli.command()
@click.option("--seeds", required=True, help="Comma-separated run seeds (>= 5).")
@click.option("--config", "config_path", type=click.Path(), default=None, help="JSON run config.")
@click.option("--out", "out_dir", type=click.Path(), required=True, help="Output directory.")
def ablate(seeds: str, config_path: Optional[str], out_dir: str):
    """Run the component/variant grid and emit its CSV and manifest."""
    rc = RunConfig.load(config_path)
    seed_list = _parse_int_list(seeds, "--seeds")
    teacher = rc.load_teacher()
    scenes = rc.load_scenes()
    os.makedirs(out_dir, exist_ok=True)
    results = harness.ablation_suite(
        teacher,
        seed_list,
        dataset=scenes,
        epochs=rc.epochs,
        lr=rc.lr,
        batch_size=rc.batch_size,
        base_config=rc.distill_config(),
        csv_path=os.path.join(out_dir, "ablation.csv"),
        manifest_path=os.path.join(out_dir, "manifest.json"),
        input_hashes=rc.input_hashes(),
    )
    click.echo(f"{len(results)} runs -> {os.path.join(out_dir, 'ablation.csv')}")


@cli.command()
@click.option("--lambdas", default="0.6,0.8,1.0,1.2,1.4", show_default=True,
              help="Comma-separated mask-threshold grid.")
@click.option("--seeds", required=True, help="Comma-separated run seeds.")
@click.option("--config", "config_path", type=click.Path(), default=None, help="JSON run config.")
@click.option("--out", "out_dir", type=click.Path(), required=True, help="Output directory.")
def sweep(lambdas: str, seeds: str, config_path: Optional[str], out_dir: str):
    """Sweep the mask threshold and emit per-threshold medians as CSV."""
    rc = RunConfig.load(config_path)
    thresholds = _parse_float_list(lambdas, "--lambdas")
    seed_list = _parse_int_list(seeds, "--seeds")
    teacher = rc.load_teacher()
    scenes = rc.load_scenes()
    os.makedirs(out_dir, exist_ok=True)
    rows = harness.lambda_sweep(
        teacher,
        thresholds,
        seed_list,
        dataset=scenes,
        epochs=rc.epochs,
        lr=rc.lr,
        batch_size=rc.batch_size,
        base_config=rc.distill_config(),
        csv_path=os.path.join(out_dir, "sweep.csv"),
        manifest_path=os.path.join(out_dir, "manifest.json"),
        input_hashes=rc.input_hashes(),
    )
    click.echo(f"{len(rows)} threshold rows -> {os.path.join(out_dir, 'sweep.csv')}")


@cli.command()
def gradcheck():
    """Verify analytic gradients against finite differences for every op."""
    report = harness.gradcheck_suite()
    click.echo(report.format())
    if not report.ok:
        raise TrainingAborted(f"gradient check failed for: {', '.join(report.failures())}")


@cli.command("dump-masks")
@click.option("--config", "config_path", type=click.Path(), required=True, help="JSON run config.")
@click.option("--n", "count", type=int, default=4, show_default=True, help="Held-out samples to dump.")
@click.option("--out", "out_dir", type=click.Path(), required=True, help="Output directory.")
def dump_masks(config_path: str, count: int, out_dir: str):
    """Write per-sample attention and mask images as binary PGM.

    Attention maps are rescaled linearly to [0, 255]; masks map 0 to black
    and 1 to white.
    """
    rc = RunConfig.load(config_path)
    teacher = rc.load_teacher()
    scenes = rc.load_scenes()
    _, held_out = datamod.split(scenes, rc.train_fraction)
    if count < 1 or count > len(held_out):
        raise ConfigError(f"--n must be in [1, {len(held_out)}], got {count}")
    os.makedirs(out_dir, exist_ok=True)
    with no_grad():
        images = datamod.stack_images(held_out, range(count))
        feature, _ = forward(teacher, images)
    attn = spatial_attention(channel_abs_mean(feature), rc.temperature)
    mask = threshold_mask(attn, rc.mask_threshold)
    files = []
    for i in range(count):
        attn_path = os.path.join(out_dir, f"attention_{i:03d}.pgm")
        mask_path = os.path.join(out_dir, f"mask_{i:03d}.pgm")
        write_pgm(attn_path, _attention_to_u8(attn.map.data[i, 0]))
        write_pgm(mask_path, (mask.mask.data[i, 0] * 255).astype(np.uint8))
        files.extend([attn_path, mask_path])
    harness.write_manifest(
        os.path.join(out_dir, "manifest.json"),
        {
            "command": "dump-masks",
            "config": dataclasses.asdict(rc),
            "files": [os.path.basename(f) for f in files],
            "input_hashes": rc.input_hashes(),
        },
    )
    click.echo(f"wrote {len(files)} PGM files -> {out_dir}")


def main(argv: Optional[list[str]] = None) -> int:
    """Entry point with the documented exit-code mapping."""
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        return 1
    except click.UsageError as exc:
        exc.show(file=sys.stderr)
        return 1
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return 1
    except (TrainingAborted, TeacherNotConverged) as exc:
        click.echo(f"runtime failure: {exc}", err=True)
        return 2
    except (ValueError, OSError) as exc:
        click.echo(f"runtime failure: {exc}", err=True)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
