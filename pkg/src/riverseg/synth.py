"""Procedural water-scene generator used as the test corpus.

Each scene is textured land under a water band whose upper edge is a random
smooth shoreline; the mask is decided first and the water texture is painted
exactly on mask pixels, so mask and rendering agree by construction. Gray
bridge bars and green blobs are painted before the water and act as
distractors on land. Output is fully determined by (n, size, seed).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .data import DataError


def _upsample(coarse: np.ndarray, size: int) -> np.ndarray:
    """Bilinear blow-up of a coarse grid (align-corners=false)."""
    n = coarse.shape[0]
    ratio = n / size
    src = np.clip((np.arange(size) + 0.5) * ratio - 0.5, 0, n - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    f = src - i0
    rows = coarse[i0] * (1 - f)[:, None] + coarse[i1] * f[:, None]
    cols = rows[:, i0] * (1 - f)[None, :] + rows[:, i1] * f[None, :]
    return cols


def _smooth_noise(rng: np.random.Generator, size: int, grid: int = 6) -> np.ndarray:
    return _upsample(rng.random((grid, grid)), size)


def _shore_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    """Water = pixels below a smooth random polyline; fraction in [0.1, 0.6]."""
    xs = np.arange(size)
    for _ in range(64):
        target = rng.uniform(0.18, 0.5)
        profile = np.full(size, size * (1.0 - target))
        for _ in range(3):
            k = rng.integers(1, 4)
            amp = rng.uniform(0.02, 0.07) * size
            phase = rng.uniform(0, 2 * np.pi)
            profile += amp * np.sin(2 * np.pi * k * xs / size + phase)
        profile = np.clip(profile, 2, size - 2)
        mask = (np.arange(size)[:, None] >= profile[None, :]).astype(np.uint8)
        frac = mask.mean()
        if 0.1 <= frac <= 0.6:
            return mask
    raise RuntimeError("shoreline sampling failed to hit the water-fraction band")


def render_scene(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    """One (image, mask) pair; image uint8 RGB, mask uint8 {0,1}."""
    mask = _shore_mask(rng, size)

    # land: brown/green base with low-frequency mottling and speckle
    land_base = np.array([rng.uniform(90, 150), rng.uniform(100, 160), rng.uniform(50, 100)])
    img = np.empty((size, size, 3), dtype=np.float64)
    for c in range(3):
        img[:, :, c] = land_base[c] + 45 * (_smooth_noise(rng, size) - 0.5)
    img += rng.normal(0, 6, size=img.shape)

    # distractors painted before water so the river clips them
    if rng.random() < 0.75:
        t = int(rng.integers(2, max(3, size // 12)))
        r0 = int(rng.integers(0, size - t))
        gray = rng.uniform(95, 150)
        img[r0:r0 + t, :, :] = gray + rng.normal(0, 4, size=(t, size, 3))
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.integers(0, size, size=2)
        r = rng.uniform(size * 0.04, size * 0.12)
        blob = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        img[blob, 0] = rng.uniform(30, 70)
        img[blob, 1] = rng.uniform(110, 170)
        img[blob, 2] = rng.uniform(30, 70)

    # water: blue-dominant low-frequency texture, painted exactly on the mask
    water = np.empty_like(img)
    water[:, :, 0] = rng.uniform(20, 70) + 25 * (_smooth_noise(rng, size) - 0.5)
    water[:, :, 1] = rng.uniform(60, 120) + 25 * (_smooth_noise(rng, size) - 0.5)
    water[:, :, 2] = rng.uniform(140, 215) + 30 * (_smooth_noise(rng, size) - 0.5)
    water += rng.normal(0, 3, size=water.shape)
    wet = mask.astype(bool)
    img[wet] = water[wet]

    return np.clip(img, 0, 255).astype(np.uint8), mask


def split_counts(n: int) -> dict[str, int]:
    train = int(n * 0.7)
    val = int(n * 0.15)
    return {"train": train, "val": val, "test": n - train - val}


def synth_generate(n: int, image_size: int, seed: int, out_dir) -> Path:
    """Render n scenes into <out_dir>/<split>/{images,masks} and return the root."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if image_size % 32:
        raise DataError(f"image size must be divisible by 32, got {image_size}")
    root = Path(out_dir)
    counts = split_counts(n)
    order = (["train"] * counts["train"] + ["val"] * counts["val"]
             + ["test"] * counts["test"])
    for split in ("train", "val", "test"):
        (root / split / "images").mkdir(parents=True, exist_ok=True)
        (root / split / "masks").mkdir(parents=True, exist_ok=True)
    for i, split in enumerate(order):
        rng = np.random.default_rng([seed, i])
        img, mask = render_scene(rng, image_size)
        Image.fromarray(img).save(root / split / "images" / f"img_{i:04d}.png")
        Image.fromarray(mask * 255).save(root / split / "masks" / f"img_{i:04d}.png")
    return root
