"""Seeded synthetic blob scenes with per-cell ground truth.

Each scene is a 32x32 RGB image of anti-aliased colored disks on a noisy
background; the 8x8 label grid marks cells containing a blob center. Blob
centers are snapped at least 1px away from cell borders so every center
maps to exactly one cell. Scene i is generated from a stream derived from
(seed, i), so any index range can be produced independently.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .rng import SplitMix64, derive_stream

__all__ = [
    "IMG_SIZE",
    "CELL",
    "GRID",
    "Blob",
    "BlobScene",
    "labels_from_blobs",
    "gen_dataset",
    "split",
    "stack_images",
    "stack_labels",
    "save_dataset",
    "load_dataset",
]

IMG_SIZE = 32
CELL = 4
GRID = IMG_SIZE // CELL

_MAGIC = b"AMDD"
_VERSION = 1

_COLOR_LO = 0.25
_COLOR_HI = 1.0
_RADIUS_LO = 2.0
_RADIUS_HI = 5.0


@dataclass
class Blob:
    cx: float
    cy: float
    radius: float
    color: tuple[float, float, float]


@dataclass
class BlobScene:
    image: Tensor  # (3, 32, 32) in [0, 1]
    labels: Tensor  # (1, 8, 8) in {0, 1}
    blobs: list[Blob]


def labels_from_blobs(blobs: list[Blob]) -> np.ndarray:
    """Cell grid with 1 wherever a blob center lands."""
    labels = np.zeros((1, GRID, GRID))
    for blob in blobs:
        labels[0, int(blob.cy // CELL), int(blob.cx // CELL)] = 1.0
    return labels


def _gen_scene(rng: SplitMix64, blobs_range: tuple[int, int], noise_amplitude: float) -> BlobScene:
    lo, hi = blobs_range
    n_blobs = lo + rng.randint(hi - lo + 1)
    blobs = []
    for _ in range(n_blobs):
        ci = rng.randint(GRID)
        cj = rng.randint(GRID)
        cx = CELL * ci + 1.0 + 2.0 * rng.uniform()
        cy = CELL * cj + 1.0 + 2.0 * rng.uniform()
        radius = _RADIUS_LO + (_RADIUS_HI - _RADIUS_LO) * rng.uniform()
        color = tuple(_COLOR_LO + (_COLOR_HI - _COLOR_LO) * rng.uniform() for _ in range(3))
        blobs.append(Blob(cx=cx, cy=cy, radius=radius, color=color))

    image = noise_amplitude * rng.uniform_array(3 * IMG_SIZE * IMG_SIZE).reshape(3, IMG_SIZE, IMG_SIZE)
    yy, xx = np.mgrid[0:IMG_SIZE, 0:IMG_SIZE]
    px, py = xx + 0.5, yy + 0.5
    for blob in blobs:
        dist = np.sqrt((px - blob.cx) ** 2 + (py - blob.cy) ** 2)
        alpha = np.clip(blob.radius + 0.5 - dist, 0.0, 1.0)
        color = np.asarray(blob.color)[:, None, None]
        image = image * (1.0 - alpha) + color * alpha
    image = np.clip(image, 0.0, 1.0)
    return BlobScene(image=Tensor(image), labels=Tensor(labels_from_blobs(blobs)), blobs=blobs)


def gen_dataset(
    seed: int,
    count: int,
    blobs_per_image: tuple[int, int] = (1, 4),
    noise_amplitude: float = 0.1,
) -> list[BlobScene]:
    """``count`` scenes, each deterministic from (seed, index)."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    lo, hi = blobs_per_image
    if not 0 <= lo <= hi:
        raise ValueError(f"invalid blobs_per_image range {blobs_per_image}")
    return [
        _gen_scene(derive_stream(seed, f"scene-{i}"), blobs_per_image, noise_amplitude)
        for i in range(count)
    ]


def split(dataset: list[BlobScene], train_fraction: float) -> tuple[list[BlobScene], list[BlobScene]]:
    """Deterministic prefix split; generation order is already random."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n_train = round(train_fraction * len(dataset))
    return dataset[:n_train], dataset[n_train:]


def stack_images(scenes: list[BlobScene], indices=None) -> Tensor:
    idx = range(len(scenes)) if indices is None else indices
    return Tensor(np.stack([scenes[i].image.data for i in idx]))


def stack_labels(scenes: list[BlobScene], indices=None) -> Tensor:
    idx = range(len(scenes)) if indices is None else indices
    return Tensor(np.stack([scenes[i].labels.data for i in idx]))


# ---------------------------------------------------------------------------
# dataset file format: "AMDD", version u32, count u32, then per scene:
# image 3*32*32 little-endian f64, 64 label bytes (u8 0/1), blob count u16,
# then per blob 6 little-endian f64 (cx, cy, radius, r, g, b).

def save_dataset(path: str, scenes: list[BlobScene]) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(scenes)))
        for scene in scenes:
            fh.write(scene.image.data.astype("<f8").tobytes())
            fh.write(scene.labels.data.astype(np.uint8).tobytes())
            fh.write(struct.pack("<H", len(scene.blobs)))
            for blob in scene.blobs:
                fh.write(struct.pack("<6d", blob.cx, blob.cy, blob.radius, *blob.color))


def load_dataset(path: str) -> list[BlobScene]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}, expected {_MAGIC!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported dataset file version {version}")
    offset = 12
    img_bytes = 3 * IMG_SIZE * IMG_SIZE * 8
    label_bytes = GRID * GRID
    scenes = []
    for _ in range(count):
        image = (
            np.frombuffer(blob, dtype="<f8", count=3 * IMG_SIZE * IMG_SIZE, offset=offset)
            .reshape(3, IMG_SIZE, IMG_SIZE)
            .astype(np.float64)
        )
        offset += img_bytes
        labels = (
            np.frombuffer(blob, dtype=np.uint8, count=label_bytes, offset=offset)
            .reshape(1, GRID, GRID)
            .astype(np.float64)
        )
        offset += label_bytes
        (n_blobs,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        blobs = []
        for _ in range(n_blobs):
            cx, cy, radius, r, g, b = struct.unpack_from("<6d", blob, offset)
            offset += 48
            blobs.append(Blob(cx=cx, cy=cy, radius=radius, color=(r, g, b)))
        scenes.append(BlobScene(image=Tensor(image), labels=Tensor(labels), blobs=blobs))
    return scenes
