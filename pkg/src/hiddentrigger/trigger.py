"""Trigger patches: random color grids upsampled bilinearly, pasted via masks.

A trigger is a small PxP patch built by drawing a random 4x4 grid of colors
and resizing it with bilinear interpolation. Pasting overwrites the PxP
window at an integer placement and leaves every other pixel untouched.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import ImageTensor, check_pixel_range

BASE_GRID_SIZE = 4


@dataclass(frozen=True)
class MaskPlacement:
    """Integer location of a PxP patch window: rows top..top+P-1, same for columns."""

    top: int
    left: int
    patch_size: int


@dataclass
class Trigger:
    patch: ImageTensor
    trigger_id: int
    seed: int
    base_grid: np.ndarray

    @property
    def patch_size(self) -> int:
        return self.patch.pixels.shape[0]


def bilinear_resize(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with the half-pixel (align-corners-false) convention.

    Source sample coordinate for output index i along an axis of input length
    n_src and output length n_out is (i + 0.5) * n_src / n_out - 0.5, clamped
    to [0, n_src - 1]. Channels are interpolated independently.
    """
    src = np.asarray(pixels, dtype=np.float64)
    if src.size == 0:
        raise ValueError("cannot resize an empty image")
    if out_h < 1 or out_w < 1:
        raise ValueError("output dimensions must be positive")
    h, w = src.shape[0], src.shape[1]

    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).reshape(out_h, 1)
    wx = (xs - x0).reshape(1, out_w)
    if src.ndim == 3:
        wy = wy[..., None]
        wx = wx[..., None]

    top = src[y0][:, x0] * (1.0 - wx) + src[y0][:, x1] * wx
    bot = src[y1][:, x0] * (1.0 - wx) + src[y1][:, x1] * wx
    out = top * (1.0 - wy) + bot * wy
    return out.astype(np.float32)


def generate_trigger(patch_size: int, seed: int, trigger_id: int | None = None) -> Trigger:
    """Draw a random 4x4 color grid and upsample it to patch_size x patch_size.

    Colors are uniform per channel on [0, 255]. The same (patch_size, seed)
    always produces the same patch; trigger_id defaults to the seed.
    """
    if patch_size < BASE_GRID_SIZE:
        raise ValueError(f"patch_size must be at least {BASE_GRID_SIZE}")
    rng = np.random.default_rng(seed)
    base_grid = rng.uniform(0.0, 255.0, size=(BASE_GRID_SIZE, BASE_GRID_SIZE, 3))
    base_grid = base_grid.astype(np.float32)
    patch = bilinear_resize(base_grid, patch_size, patch_size)
    return Trigger(
        patch=ImageTensor(patch),
        trigger_id=int(seed if trigger_id is None else trigger_id),
        seed=int(seed),
        base_grid=base_grid,
    )


def apply_trigger(image: ImageTensor, trig: Trigger, place: MaskPlacement) -> ImageTensor:
    """Paste the trigger patch onto a copy of the image at the given placement.

    The output equals the patch inside the window and the input everywhere
    else; the input image is left unmodified.
    """
    h, w = image.pixels.shape[0], image.pixels.shape[1]
    p = place.patch_size
    if p != trig.patch_size:
        raise ValueError(
            f"placement patch_size {p} does not match trigger size {trig.patch_size}"
        )
    if not (0 <= place.top <= h - p and 0 <= place.left <= w - p):
        raise ValueError(
            f"placement ({place.top}, {place.left}, {p}) falls outside a {h}x{w} image"
        )
    out = image.pixels.copy()
    out[place.top : place.top + p, place.left : place.left + p, :] = trig.patch.pixels
    return ImageTensor(out, image.label)


def random_placement(image_dims, patch_size: int, rng: np.random.Generator) -> MaskPlacement:
    """Uniform placement with the patch fully inside the image.

    The random stream is caller-owned; callers that need reproducible
    placements seed it themselves.
    """
    h, w = int(image_dims[0]), int(image_dims[1])
    if patch_size > min(h, w):
        raise ValueError(f"patch_size {patch_size} exceeds image dims {h}x{w}")
    top = int(rng.integers(0, h - patch_size + 1))
    left = int(rng.integers(0, w - patch_size + 1))
    return MaskPlacement(top, left, patch_size)


def corner_placement(image_dims, patch_size: int) -> MaskPlacement:
    """Bottom-right anchored placement."""
    h, w = int(image_dims[0]), int(image_dims[1])
    if patch_size > min(h, w):
        raise ValueError(f"patch_size {patch_size} exceeds image dims {h}x{w}")
    return MaskPlacement(h - patch_size, w - patch_size, patch_size)


def save_trigger(trig: Trigger, path_prefix) -> tuple[Path, Path]:
    """Write <prefix>.png (8-bit render) and <prefix>.manifest.json.

    The manifest keeps the exact float base grid, so the trigger can be
    regenerated losslessly even though the PNG is quantized.
    """
    from PIL import Image

    prefix = Path(path_prefix)
    check_pixel_range(trig.patch.pixels, "trigger patch")
    png_path = prefix.with_suffix(".png")
    Image.fromarray(
        np.clip(np.rint(trig.patch.pixels), 0, 255).astype(np.uint8)
    ).save(png_path)
    manifest_path = prefix.parent / (prefix.name + ".manifest.json")
    manifest = {
        "trigger_id": trig.trigger_id,
        "seed": trig.seed,
        "patch_size": trig.patch_size,
        "base_grid": trig.base_grid.astype(float).tolist(),
    }
    manifest_path.write_text(json.dumps(manifest, indent=2))
    return png_path, manifest_path
