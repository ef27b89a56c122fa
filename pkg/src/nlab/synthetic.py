"""Procedural 10-class image corpus written in the CIFAR-10 binary layout.

Stand-in data for environments without the real CIFAR-10 files. Each image
is a sky-over-ground scene (so "up" is recoverable and the rotation task is
learnable) holding one class-specific shape; colors are shared between
class pairs so the shape has to be recognized. A random distractor blob,
position/scale jitter and pixel noise keep the task from being trivial.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .dataset import TEST_FILE, TRAIN_FILES, write_cifar_batch

SIZE = 32

_PALETTE = np.array([
    [220, 60, 50],
    [60, 170, 70],
    [60, 90, 220],
    [230, 200, 60],
    [170, 70, 200],
], dtype=np.float64)


def _shape_mask(label: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Mask in object coordinates (u right, v down, unit = object radius)."""
    r2 = u * u + v * v
    au, av = np.abs(u), np.abs(v)
    if label == 0:  # disk
        return r2 < 1.0
    if label == 1:  # square
        return np.maximum(au, av) < 0.8
    if label == 2:  # upward triangle
        return (v < 0.9) & (v > -1.0) & (au < (v + 1.0) / 2.0)
    if label == 3:  # plus
        return ((au < 0.28) & (av < 1.0)) | ((av < 0.28) & (au < 1.0))
    if label == 4:  # ring
        return (r2 < 1.0) & (r2 > 0.36)
    if label == 5:  # horizontal bar
        return (au < 1.1) & (av < 0.32)
    if label == 6:  # T
        return ((np.abs(v + 0.7) < 0.28) & (au < 1.0)) | ((au < 0.28) & (v > -0.7) & (v < 1.0))
    if label == 7:  # diamond
        return au + av < 1.0
    if label == 8:  # two dots side by side
        return ((u - 0.6) ** 2 + v * v < 0.16) | ((u + 0.6) ** 2 + v * v < 0.16)
    if label == 9:  # X
        return ((np.abs(u - v) < 0.38) | (np.abs(u + v) < 0.38)) & (np.maximum(au, av) < 0.95)
    raise ValueError(label)


def render(label: int, rng: np.random.Generator, noise: float = 18.0) -> np.ndarray:
    yy, xx = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)
    sky = np.array([120, 170, 230]) + rng.uniform(-40, 40, 3)
    ground = np.array([110, 90, 60]) + rng.uniform(-40, 40, 3)
    horizon = rng.uniform(14, 22)
    blend = 1.0 / (1.0 + np.exp(-(yy - horizon) / 1.5))
    shade = 1.0 - 0.25 * yy / SIZE  # light falls from above
    img = ((1 - blend)[..., None] * sky + blend[..., None] * ground) * shade[..., None]

    # distractor blob
    by, bx = rng.uniform(2, SIZE - 2, 2)
    br = rng.uniform(1.5, 3.5)
    blob = (yy - by) ** 2 + (xx - bx) ** 2 < br * br
    img[blob] = rng.uniform(30, 230, 3)

    radius = rng.uniform(6.0, 9.0)
    cy, cx = rng.uniform(10, 22, 2)
    mask = _shape_mask(label, (xx - cx) / radius, (yy - cy) / radius)
    color = _PALETTE[label % 5] + rng.uniform(-35, 35, 3)
    img[mask] = color * rng.uniform(0.8, 1.1)

    img += rng.normal(0.0, noise, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def make_images(n: int, seed: int, noise: float = 18.0) -> tuple[np.ndarray, np.ndarray]:
    """n images with class-balanced labels in shuffled order."""
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % 10)
    images = np.stack([render(int(y), rng, noise) for y in labels]) if n else np.zeros((0, SIZE, SIZE, 3), np.uint8)
    return images, labels


def write_dataset(directory, per_batch: int = 10000, n_test: int = 10000, seed: int = 0,
                  noise: float = 18.0) -> Path:
    """Write data_batch_1..5.bin and test_batch.bin in CIFAR-10 binary layout."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(seed).spawn(len(TRAIN_FILES) + 1)
    for name, ss in zip(TRAIN_FILES + (TEST_FILE,), seeds):
        count = n_test if name == TEST_FILE else per_batch
        images, labels = make_images(count, int(ss.generate_state(1)[0]), noise)
        write_cifar_batch(directory / name, images, labels)
    return directory
