"""Small teacher/student CNNs over synthetic images.

Three stride-1 conv+ReLU stages with 2x2 average pooling between them give
a neck feature at 1/4 of the input resolution; a 1x1 head produces one
objectness logit per cell. The teacher is twice as wide as the student.
Parameters round-trip through a flat little-endian binary format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import ParamSet
from .rng import derive_stream

__all__ = [
    "ROLE_WIDTHS",
    "ToyDetector",
    "build_model",
    "forward",
    "task_loss",
    "freeze",
    "save_weights",
    "load_weights",
    "save_detector",
    "load_detector",
]

ROLE_WIDTHS = {"teacher": 16, "student": 8}

_MAGIC = b"AMDW"
_VERSION = 1


@dataclass
class ToyDetector:
    role: str
    width: int
    params: ParamSet


def build_model(role: str, seed: int, width: int | None = None) -> ToyDetector:
    """Deterministically initialized detector; teacher width 16, student 8."""
    if role not in ROLE_WIDTHS:
        raise ValueError(f"role must be one of {tuple(ROLE_WIDTHS)}, got '{role}'")
    c = ROLE_WIDTHS[role] if width is None else width
    rng = derive_stream(seed, f"model-{role}")
    params = ParamSet()
    params.add("stage1.w", ad.glorot_uniform((c, 3, 3, 3), 3 * 9, c * 9, rng))
    params.add("stage1.b", ad.zeros((c,)))
    params.add("stage2.w", ad.glorot_uniform((c, c, 3, 3), c * 9, c * 9, rng))
    params.add("stage2.b", ad.zeros((c,)))
    params.add("stage3.w", ad.glorot_uniform((c, c, 3, 3), c * 9, c * 9, rng))
    params.add("stage3.b", ad.zeros((c,)))
    params.add("head.w", ad.glorot_uniform((1, c, 1, 1), c, 1, rng))
    params.add("head.b", ad.zeros((1,)))
    return ToyDetector(role=role, width=c, params=params)


def forward(model: ToyDetector, images: Tensor) -> tuple[Tensor, Tensor]:
    """Neck feature and per-cell logits for a batch of images.

    Input extents must be divisible by 4; the feature and logits live on a
    grid 4x smaller than the input.
    """
    if images.data.ndim != 4:
        raise ValueError(f"forward expects (N, 3, H, W) images, got {images.shape}")
    _, _, h, w = images.shape
    if h % 4 or w % 4 or h < 4 or w < 4:
        raise ValueError(f"image extents ({h}, {w}) must be positive multiples of 4 (dims 2, 3)")
    p = model.params
    x = ad.relu(ad.conv2d(images, p["stage1.w"], p["stage1.b"], padding=1))
    x = ad.avg_pool2x2(x)
    x = ad.relu(ad.conv2d(x, p["stage2.w"], p["stage2.b"], padding=1))
    x = ad.avg_pool2x2(x)
    feature = ad.relu(ad.conv2d(x, p["stage3.w"], p["stage3.b"], padding=1))
    logits = ad.conv2d(feature, p["head.w"], p["head.b"], padding=0)
    return feature, logits


def task_loss(logits: Tensor, labels: Tensor) -> Tensor:
    """Mean binary cross-entropy of per-cell logits against {0,1} labels."""
    if logits.shape != labels.shape:
        raise ValueError(f"task_loss: logits shape {logits.shape} != labels shape {labels.shape}")
    return ad.bce_with_logits(logits, labels)


def freeze(model: ToyDetector) -> ToyDetector:
    """Mark every parameter constant so no tape records through the model."""
    for _, tensor in model.params.items():
        tensor.requires_grad = False
    return model


# ---------------------------------------------------------------------------
# weight file format: "AMDW", version u32, count u32, then per tensor
# (sorted by name): name length u16, name utf-8, rank u8, extents u32 each,
# payload little-endian f64.

def save_weights(path: str, params: ParamSet) -> None:
    names = sorted(params.names())
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(names)))
        for name in names:
            data = params[name].data
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.astype("<f8").tobytes())


def load_weights(path: str) -> dict[str, Tensor]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}, expected {_MAGIC!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported weight file version {version}")
    offset = 12
    out: dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        shape = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(blob, dtype="<f8", count=size, offset=offset).reshape(shape)
        offset += 8 * size
        out[name] = Tensor(values.astype(np.float64))
    return out


def save_detector(path: str, model: ToyDetector) -> None:
    save_weights(path, model.params)


def load_detector(path: str, role: str = "teacher") -> ToyDetector:
    """Rebuild a detector from a weight file; width comes from stage1."""
    tensors = load_weights(path)
    expected = {"stage1.w", "stage1.b", "stage2.w", "stage2.b", "stage3.w", "stage3.b", "head.w", "head.b"}
    if set(tensors) != expected:
        raise ValueError(f"{path}: unexpected parameter names {sorted(set(tensors) ^ expected)}")
    width = tensors["stage1.w"].shape[0]
    params = ParamSet(tensors)
    return ToyDetector(role=role, width=width, params=params)
