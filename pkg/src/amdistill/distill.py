"""Attention-guided masked feature distillation.

The teacher's channel-mean absolute feature gives a spatial attention map
(temperature softmax rescaled by H*W); positions whose attention exceeds a
threshold are zeroed on the student feature, and a small generation block
reconstructs the teacher feature from what is left. A squeeze-excitation
path on the teacher feature contributes per-channel gates that are fused
into the generated feature by a Hadamard product.

The attention map and the binary mask are statistics of the frozen teacher
and never carry gradients; the SE weights, the generation block and the
channel adaptation layer are trainable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import ParamSet
from .rng import SplitMix64

__all__ = [
    "DistillConfig",
    "SpatialAttention",
    "BinaryMask",
    "ChannelClue",
    "SEParams",
    "GenBlockParams",
    "channel_abs_mean",
    "spatial_attention",
    "threshold_mask",
    "random_mask",
    "random_mask_with_counts",
    "apply_mask",
    "se_clue",
    "generate",
    "adaptation",
    "distill_loss",
    "basic_feature_loss",
    "overall_loss",
    "build_se",
    "build_gen_block",
    "build_adaptation",
]

GEN_VARIANTS = ("dense3x3_x2", "dense3x3_x1", "mbconv_dw5")
MASK_POLICIES = ("adaptive", "random", "none")
CLUE_LOCATIONS = ("after", "within")


@dataclass(frozen=True)
class DistillConfig:
    """Hyper-parameters and variant switches for one distillation run.

    ``alpha=None`` asks the training harness to balance the distillation
    term against the task loss on the first batch and freeze the result.
    ``random_ratio=None`` under the random mask policy matches the zero
    count of the adaptive mask batch by batch (budget parity).
    """

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

    def __post_init__(self):
        if self.alpha is not None and self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.mask_threshold <= 0:
            raise ValueError(f"mask_threshold must be > 0, got {self.mask_threshold}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.mask_policy not in MASK_POLICIES:
            raise ValueError(f"mask_policy must be one of {MASK_POLICIES}, got '{self.mask_policy}'")
        if self.random_ratio is not None and not 0.0 <= self.random_ratio <= 1.0:
            raise ValueError(f"random_ratio must be in [0, 1], got {self.random_ratio}")
        if self.gen_block not in GEN_VARIANTS:
            raise ValueError(f"gen_block must be one of {GEN_VARIANTS}, got '{self.gen_block}'")
        if self.clue_location not in CLUE_LOCATIONS:
            raise ValueError(
                f"clue_location must be one of {CLUE_LOCATIONS}, got '{self.clue_location}'"
            )
        if self.se_reduction < 1:
            raise ValueError(f"se_reduction must be >= 1, got {self.se_reduction}")


@dataclass
class SpatialAttention:
    """Per-sample (N, 1, H, W) map scaled so each sample averages to 1."""

    map: Tensor

    def __post_init__(self):
        if self.map.data.ndim != 4 or self.map.shape[1] != 1:
            raise ValueError(f"spatial attention must be (N, 1, H, W), got {self.map.shape}")


@dataclass
class BinaryMask:
    """Per-sample (N, 1, H, W) map of exact zeros and ones; never on the tape."""

    mask: Tensor

    def __post_init__(self):
        m = self.mask.data
        if m.ndim != 4 or self.mask.shape[1] != 1:
            raise ValueError(f"binary mask must be (N, 1, H, W), got {self.mask.shape}")
        if not np.all((m == 0.0) | (m == 1.0)):
            raise ValueError("binary mask values must be exactly 0 or 1")

    def zero_counts(self) -> list[int]:
        """Masked positions per sample."""
        return [int((self.mask.data[i] == 0.0).sum()) for i in range(self.mask.shape[0])]

    def zero_fraction(self) -> float:
        """Mean fraction of masked positions over the batch."""
        return float((self.mask.data == 0.0).mean())


@dataclass
class ChannelClue:
    """Per-sample (N, C) channel gates in the open interval (0, 1)."""

    clue: Tensor

    def __post_init__(self):
        if self.clue.data.ndim != 2:
            raise ValueError(f"channel clue must be (N, C), got {self.clue.shape}")


@dataclass
class SEParams:
    """Squeeze-excitation bottleneck weights computed on the teacher feature."""

    reduce_w: Tensor
    reduce_b: Tensor
    expand_w: Tensor
    expand_b: Tensor
    hidden_relu: bool = True

    def named(self) -> dict[str, Tensor]:
        return {
            "se_reduce.w": self.reduce_w,
            "se_reduce.b": self.reduce_b,
            "se_expand.w": self.expand_w,
            "se_expand.b": self.expand_b,
        }


@dataclass
class GenBlockParams:
    """Weights of one generation-block variant, plus the optional SE path.

    Every conv is shape-preserving and ends at the teacher channel count.
    """

    variant: str
    weights: dict[str, Tensor]
    se: Optional[SEParams] = None

    def named(self) -> dict[str, Tensor]:
        out = dict(self.weights)
        if self.se is not None:
            out.update(self.se.named())
        return out

    def param_set(self) -> ParamSet:
        return ParamSet(self.named())


# ---------------------------------------------------------------------------
# attention and masking

def channel_abs_mean(teacher_feat: Tensor) -> Tensor:
    """Mean absolute value across channels: (N, C, H, W) -> (N, 1, H, W).

    A statistic of the frozen teacher; the result is a constant leaf.
    """
    if teacher_feat.data.ndim != 4:
        raise ValueError(f"channel_abs_mean expects (N, C, H, W), got {teacher_feat.shape}")
    return Tensor(np.abs(teacher_feat.data).mean(axis=1, keepdims=True))


def spatial_attention(g: Tensor, temperature: float) -> SpatialAttention:
    """Flatten, temperature-softmax and rescale by H*W, per sample.

    The rescale makes the per-sample mean exactly 1, so a threshold of 1
    separates above-average positions from the rest.
    """
    if g.data.ndim != 4 or g.shape[1] != 1:
        raise ValueError(f"spatial_attention expects (N, 1, H, W), got {g.shape}")
    n, _, h, w = g.shape
    flat = Tensor(g.data.reshape(n, h * w))
    soft = ad.softmax_temp(flat, temperature)
    return SpatialAttention(Tensor((soft.data * (h * w)).reshape(n, 1, h, w)))


def threshold_mask(attn: SpatialAttention, threshold: float) -> BinaryMask:
    """0 where attention strictly exceeds the threshold, 1 elsewhere."""
    return BinaryMask(Tensor(np.where(attn.map.data > threshold, 0.0, 1.0)))


def random_mask(n: int, h: int, w: int, ratio: float, rng_seed: int) -> BinaryMask:
    """Exactly round(ratio*H*W) zeros per sample, uniform without replacement."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"random_mask: ratio must be in [0, 1], got {ratio}")
    k = int(round(ratio * h * w))
    return random_mask_with_counts([k] * n, h, w, rng_seed)


def random_mask_with_counts(counts: list[int], h: int, w: int, rng_seed: int) -> BinaryMask:
    """Random mask with a prescribed zero count per sample (budget parity)."""
    rng = SplitMix64(rng_seed)
    m = np.ones((len(counts), 1, h, w))
    for i, k in enumerate(counts):
        flat = m[i, 0].reshape(-1)
        flat[rng.choose(h * w, k)] = 0.0
    return BinaryMask(Tensor(m))


def apply_mask(student_feat: Tensor, m: BinaryMask) -> Tensor:
    """Zero the student feature at masked positions, broadcast over channels.

    The mask is a constant, so gradients reach the student feature through
    kept positions only.
    """
    if student_feat.data.ndim != 4:
        raise ValueError(f"apply_mask expects (N, C, H, W), got {student_feat.shape}")
    n, _, h, w = student_feat.shape
    mn, _, mh, mw = m.mask.shape
    if (mn, mh, mw) != (n, h, w):
        raise ValueError(
            f"apply_mask: mask extents ({mn}, {mh}, {mw}) != feature extents ({n}, {h}, {w})"
        )
    return ad.hadamard(student_feat, m.mask)


# ---------------------------------------------------------------------------
# channel clue and generation

def build_se(channels: int, reduction: int, rng: SplitMix64, hidden_relu: bool = True) -> SEParams:
    """SE bottleneck sized channels -> max(1, channels // reduction) -> channels."""
    hidden = max(1, channels // reduction)
    return SEParams(
        reduce_w=ad.glorot_uniform((hidden, channels), channels, hidden, rng),
        reduce_b=ad.zeros((hidden,), requires_grad=True),
        expand_w=ad.glorot_uniform((channels, hidden), hidden, channels, rng),
        expand_b=ad.zeros((channels,), requires_grad=True),
        hidden_relu=hidden_relu,
    )


def se_clue(teacher_feat: Tensor, se: SEParams) -> ChannelClue:
    """Channel gates from the teacher feature: pool, bottleneck, sigmoid.

    The teacher feature is treated as a constant; only the SE weights train.
    """
    pooled = ad.global_avg_pool(teacher_feat.detach())
    hidden = ad.linear(pooled, se.reduce_w, se.reduce_b)
    if se.hidden_relu:
        hidden = ad.relu(hidden)
    excited = ad.linear(hidden, se.expand_w, se.expand_b)
    return ChannelClue(ad.sigmoid(excited))


def _conv_params(tag: str, cout: int, cin: int, k: int, rng: SplitMix64) -> dict[str, Tensor]:
    return {
        f"{tag}.w": ad.glorot_uniform((cout, cin, k, k), cin * k * k, cout * k * k, rng),
        f"{tag}.b": ad.zeros((cout,), requires_grad=True),
    }


def build_gen_block(
    channels: int,
    variant: str,
    rng: SplitMix64,
    se: Optional[SEParams] = None,
    expand: int = 4,
) -> GenBlockParams:
    """Generation-block weights for one variant at the teacher channel count."""
    if variant == "dense3x3_x2":
        weights = _conv_params("conv1", channels, channels, 3, rng)
        weights.update(_conv_params("conv2", channels, channels, 3, rng))
    elif variant == "dense3x3_x1":
        weights = _conv_params("conv1", channels, channels, 3, rng)
    elif variant == "mbconv_dw5":
        wide = channels * expand
        weights = _conv_params("expand", wide, channels, 1, rng)
        weights["depthwise.w"] = ad.glorot_uniform((wide, 1, 5, 5), 25, 25, rng)
        weights.update(_conv_params("project", channels, wide, 1, rng))
    else:
        raise ValueError(f"unknown generation block variant '{variant}'")
    return GenBlockParams(variant=variant, weights=weights, se=se)


def generate(
    masked_feat: Tensor,
    params: GenBlockParams,
    clue: Optional[ChannelClue] = None,
    location: str = "after",
) -> Tensor:
    """Reconstruct a teacher-shaped feature from the masked student feature.

    ``location="after"`` fuses the channel clue into the block output;
    ``location="within"`` fuses it between the two convs of the two-conv
    variant (rejected for any other variant).
    """
    if location not in CLUE_LOCATIONS:
        raise ValueError(f"location must be one of {CLUE_LOCATIONS}, got '{location}'")
    w = params.weights
    if params.variant == "dense3x3_x2":
        h = ad.relu(ad.conv2d(masked_feat, w["conv1.w"], w["conv1.b"], padding=1))
        if clue is not None and location == "within":
            h = ad.hadamard(h, clue.clue)
        out = ad.conv2d(h, w["conv2.w"], w["conv2.b"], padding=1)
    elif params.variant == "dense3x3_x1":
        if clue is not None and location == "within":
            raise ValueError("clue location 'within' requires the two-conv variant")
        out = ad.conv2d(masked_feat, w["conv1.w"], w["conv1.b"], padding=1)
    elif params.variant == "mbconv_dw5":
        if clue is not None and location == "within":
            raise ValueError("clue location 'within' requires the two-conv variant")
        h = ad.relu(ad.conv2d(masked_feat, w["expand.w"], w["expand.b"], padding=0))
        h = ad.relu(ad.depthwise_conv2d(h, w["depthwise.w"], padding=2))
        out = ad.conv2d(h, w["project.w"], w["project.b"], padding=0)
    else:
        raise ValueError(f"unknown generation block variant '{params.variant}'")
    if clue is not None and location == "after":
        out = ad.hadamard(out, clue.clue)
    return out


# ---------------------------------------------------------------------------
# adaptation and losses

def build_adaptation(student_channels: int, teacher_channels: int, rng: SplitMix64) -> Tensor:
    """1x1 conv weight mapping student channels onto teacher channels."""
    return ad.glorot_uniform(
        (teacher_channels, student_channels, 1, 1), student_channels, teacher_channels, rng
    )


def adaptation(student_feat: Tensor, w: Tensor) -> Tensor:
    """Align student channels to the teacher's via a bias-free 1x1 conv."""
    return ad.conv2d(student_feat, w, padding=0)


def distill_loss(teacher_feat: Tensor, generated: Tensor) -> Tensor:
    """Unnormalized sum of squared differences; teacher side is constant."""
    if teacher_feat.shape != generated.shape:
        raise ValueError(
            f"distill_loss: teacher shape {teacher_feat.shape} != generated shape {generated.shape}"
        )
    return ad.sum_squared_error(teacher_feat.detach(), generated)


def basic_feature_loss(
    teacher_feat: Tensor, student_feat: Tensor, adapt_w: Optional[Tensor] = None
) -> Tensor:
    """No-masking baseline: per-sample mean squared error after adaptation.

    Normalized by C*H*W per sample and averaged over the batch, unlike the
    unnormalized reconstruction objective.
    """
    aligned = adaptation(student_feat, adapt_w) if adapt_w is not None else student_feat
    if teacher_feat.shape != aligned.shape:
        raise ValueError(
            f"basic_feature_loss: teacher shape {teacher_feat.shape} != aligned student "
            f"shape {aligned.shape}"
        )
    total = ad.sum_squared_error(teacher_feat.detach(), aligned)
    return ad.scale(total, 1.0 / teacher_feat.data.size)


def overall_loss(l_fea: Tensor, l_original: Tensor, alpha: float) -> Tensor:
    """alpha * distillation loss + task loss."""
    if alpha < 0:
        raise ValueError(f"overall_loss: alpha must be >= 0, got {alpha}")
    if l_fea.shape != () or l_original.shape != ():
        raise ValueError("overall_loss expects scalar losses")
    return ad.add(ad.scale(l_fea, alpha), l_original)
