"""Dataset ingestion, deterministic three-way splits, and synthetic images.

Images are carried as HxWxC float32 arrays on the 8-bit intensity scale
[0, 255]. Every randomized operation takes an explicit seed and is a pure
function of (inputs, seed), so splits and datasets are reproducible
bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_SIZE = 32
NUM_CHANNELS = 3
CIFAR_RECORD_BYTES = 1 + IMAGE_SIZE * IMAGE_SIZE * NUM_CHANNELS
CIFAR_NUM_LABELS = 10


@dataclass
class ImageTensor:
    """One image: HxWxC float32 pixels in [0, 255], plus an optional label."""

    pixels: np.ndarray
    label: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.pixels.shape)


@dataclass
class DatasetSplit:
    """Per-category split into poison-generation, fine-tuning, and test sets.

    The three lists are pairwise disjoint by construction (a single shuffled
    permutation, sliced contiguously).
    """

    poison_gen: list[ImageTensor]
    finetune: list[ImageTensor]
    test: list[ImageTensor]
    category: int
    seed: int


@dataclass(frozen=True)
class PairSpec:
    """A source/target category pair plus the trigger identity for one run."""

    source_category: int
    target_category: int
    trigger_id: int
    seed: int

    def __post_init__(self):
        if self.source_category == self.target_category:
            raise ValueError("source and target categories must differ")


def check_pixel_range(pixels: np.ndarray, what: str = "image") -> None:
    if pixels.size and (pixels.min() < 0.0 or pixels.max() > 255.0):
        raise ValueError(
            f"{what} has pixel values outside [0, 255]: "
            f"min={pixels.min():.3f} max={pixels.max():.3f}"
        )


def stack_pixels(images: list[ImageTensor]) -> np.ndarray:
    """Stack a list of images into one [N, H, W, C] float32 array."""
    if not images:
        return np.zeros((0, IMAGE_SIZE, IMAGE_SIZE, NUM_CHANNELS), dtype=np.float32)
    return np.stack([im.pixels for im in images]).astype(np.float32, copy=False)


def labels_of(images: list[ImageTensor]) -> np.ndarray:
    return np.array([im.label for im in images], dtype=np.int64)


def load_cifar_binary(path, categories) -> list[ImageTensor]:
    """Read a CIFAR-10 binary batch file, keeping only the requested labels.

    Record layout (3073 bytes each): 1 label byte, then 3072 pixel bytes
    holding the red plane, green plane, and blue plane, each row-major 32x32.
    """
    raw = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD_BYTES != 0:
        raise ValueError(
            f"{path}: size {raw.size} is not a positive multiple of "
            f"{CIFAR_RECORD_BYTES}; not a CIFAR-10 binary batch"
        )
    records = raw.reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0]
    bad = np.nonzero(labels >= CIFAR_NUM_LABELS)[0]
    if bad.size:
        raise ValueError(
            f"{path}: corrupt record {bad[0]}: label byte {labels[bad[0]]} "
            f"outside 0..{CIFAR_NUM_LABELS - 1}"
        )
    wanted = {int(c) for c in categories}
    keep = np.isin(labels, sorted(wanted))
    pixels = (
        records[keep, 1:]
        .reshape(-1, NUM_CHANNELS, IMAGE_SIZE, IMAGE_SIZE)
        .transpose(0, 2, 3, 1)
        .astype(np.float32)
    )
    return [
        ImageTensor(px, int(lb)) for px, lb in zip(pixels, labels[keep])
    ]


# Synthetic dataset: class identity is carried by geometry alone, while shape
# color, background color, position, size, and pixel noise vary per image.
# A classifier therefore has to learn shapes, giving a feature space with
# honest intra-class variation.

_SHAPE_NAMES = (
    "disk",
    "square",
    "triangle",
    "cross",
    "ring",
    "diamond",
    "hbars",
    "vbars",
    "xcross",
    "checker",
)

_YY, _XX = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64)


def _shape_mask(shape: str, cy: float, cx: float, r: float, t: float) -> np.ndarray:
    dy = _YY - cy
    dx = _XX - cx
    if shape == "disk":
        return dy * dy + dx * dx <= r * r
    if shape == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) <= 0.85 * r
    if shape == "triangle":
        return (dy >= -r) & (dy <= 0.8 * r) & (np.abs(dx) <= 0.62 * (dy + r))
    if shape == "cross":
        arm = np.abs(dy) <= r
        bar = np.abs(dx) <= r
        return (arm & (np.abs(dx) <= t)) | (bar & (np.abs(dy) <= t))
    if shape == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if shape == "diamond":
        return np.abs(dy) + np.abs(dx) <= 1.1 * r
    if shape == "hbars":
        inside = np.abs(dx) <= r
        return inside & (
            (np.abs(dy - 0.55 * r) <= t) | (np.abs(dy + 0.55 * r) <= t)
        )
    if shape == "vbars":
        inside = np.abs(dy) <= r
        return inside & (
            (np.abs(dx - 0.55 * r) <= t) | (np.abs(dx + 0.55 * r) <= t)
        )
    if shape == "xcross":
        inside = np.maximum(np.abs(dy), np.abs(dx)) <= r
        return inside & ((np.abs(dy - dx) <= t * 1.3) | (np.abs(dy + dx) <= t * 1.3))
    if shape == "checker":
        inside = np.maximum(np.abs(dy), np.abs(dx)) <= r
        cell = max(2.0, r / 2.0)
        parity = (np.floor(dy / cell) + np.floor(dx / cell)).astype(np.int64) % 2
        return inside & (parity == 0)
    raise ValueError(f"unknown shape {shape!r}")


def _render_class_image(class_id: int, rng: np.random.Generator) -> np.ndarray:
    background = rng.uniform(20.0, 235.0, size=3)
    # Shape color offset by roughly half the intensity circle so the figure
    # never blends into the background (per-channel distance >= 88).
    foreground = (background + 128.0 + rng.uniform(-40.0, 40.0, size=3)) % 256.0
    cy, cx = rng.uniform(9.0, 23.0, size=2)
    r = rng.uniform(5.5, 10.0)
    t = rng.uniform(1.2, 2.2)
    mask = _shape_mask(_SHAPE_NAMES[class_id], cy, cx, r, t)

    img = np.empty((IMAGE_SIZE, IMAGE_SIZE, NUM_CHANNELS), dtype=np.float64)
    img[:] = background
    img[mask] = foreground
    img += rng.normal(0.0, 6.0, size=img.shape)
    np.clip(img, 0.0, 255.0, out=img)
    return img.astype(np.float32)


def generate_synthetic_dataset(
    num_classes: int, per_class: int, seed: int
) -> list[ImageTensor]:
    """Deterministic colored-shape dataset with class-dependent geometry.

    Supports up to 10 classes (one shape family per class). Calling twice
    with the same arguments yields bit-identical pixels.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    if per_class < 1:
        raise ValueError("per_class must be at least 1")
    if num_classes > len(_SHAPE_NAMES):
        raise ValueError(f"at most {len(_SHAPE_NAMES)} classes are supported")
    rng = np.random.default_rng(seed)
    images = []
    for class_id in range(num_classes):
        for _ in range(per_class):
            images.append(ImageTensor(_render_class_image(class_id, rng), class_id))
    return images


def make_split(
    images: list[ImageTensor], sizes: tuple[int, int, int], seed: int
) -> DatasetSplit:
    """Split one category's images into disjoint gen/finetune/test sets.

    Uses a single seeded permutation sliced contiguously, so the same seed
    always produces the same assignment.
    """
    n_gen, n_finetune, n_test = (int(s) for s in sizes)
    if min(n_gen, n_finetune, n_test) < 0:
        raise ValueError("split sizes must be non-negative")
    total = n_gen + n_finetune + n_test
    if total > len(images):
        raise ValueError(f"split needs {total} images but only {len(images)} given")
    labels = {im.label for im in images}
    if len(labels) > 1:
        raise ValueError(f"make_split expects a single category, got labels {labels}")
    category = labels.pop() if labels else None
    if category is None:
        category = -1

    order = np.random.default_rng(seed).permutation(len(images))
    picked = [images[i] for i in order[:total]]
    return DatasetSplit(
        poison_gen=picked[:n_gen],
        finetune=picked[n_gen : n_gen + n_finetune],
        test=picked[n_gen + n_finetune : total],
        category=int(category),
        seed=seed,
    )
