"""Synthetic desk-scale datasets and the default toy architecture.

The scene dataset couples three independent factors:

- class (0..5): the foreground shape drawn near the center AND the faint
  orientation of the background grating (so class is predictable from
  context alone when the object is masked out);
- theme (0..5): a foreground/background color pairing shared across all
  classes, i.e. color never identifies the class;
- size (0/1): small or large object, the within-class "style" factor.

Because color carries no label information, a trained classifier is free to
underdetermine it, which is exactly the ambiguity the inversion experiments
probe.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .net import Conv, Dense, Dropout, MaxPool, NetworkSpec, Relu

__all__ = [
    "SCENE_CLASSES",
    "SCENE_THEMES",
    "make_scene_spec",
    "make_tiny_spec",
    "generate_scene_dataset",
    "generate_separable_dataset",
    "DatasetStats",
    "compute_dataset_stats",
]

SCENE_CLASSES = ("hbars", "vbars", "diag", "disc", "ring", "dots")

# (foreground RGB, background tint RGB); shared across classes
SCENE_THEMES = (
    ((0.90, 0.25, 0.20), (0.55, 0.50, 0.45)),
    ((0.20, 0.75, 0.30), (0.45, 0.50, 0.55)),
    ((0.25, 0.35, 0.90), (0.55, 0.55, 0.40)),
    ((0.90, 0.80, 0.20), (0.40, 0.45, 0.60)),
    ((0.80, 0.30, 0.80), (0.50, 0.60, 0.45)),
    ((0.25, 0.80, 0.80), (0.60, 0.45, 0.50)),
)


def make_scene_spec(size: int = 64, class_count: int = len(SCENE_CLASSES)) -> NetworkSpec:
    """Default stack: three conv+pool blocks down to a 6x6 grid, then fc1-fc3."""
    if size != 64:
        raise ValidationError("the default architecture is laid out for 64x64 inputs")
    layers = (
        Conv(3, 8, kernel=5, stride=1, pad=2), Relu(), MaxPool(2, 2),      # 32x32x8
        Conv(8, 16, kernel=5, stride=1, pad=2), Relu(), MaxPool(2, 2),     # 16x16x16
        Conv(16, 16, kernel=5, stride=1, pad=0), Relu(), MaxPool(2, 2),    # 6x6x16
        Dense(6 * 6 * 16, 128), Relu(), Dropout(0.5),
        Dense(128, 64), Relu(), Dropout(0.5),
        Dense(64, class_count),
    )
    return NetworkSpec(layers, class_count, (size, size, 3))


def make_tiny_spec(size: int = 12, channels: int = 3, class_count: int = 5,
                   fc1: int = 10, fc2: int = 8) -> NetworkSpec:
    """Small stack for gradient checks and fast unit tests."""
    layers = (
        Conv(channels, 4, kernel=3, stride=1, pad=1), Relu(), MaxPool(2, 2),
        Conv(4, 6, kernel=3, stride=1, pad=1), Relu(), MaxPool(2, 2),
        Dense((size // 4) * (size // 4) * 6, fc1), Relu(),
        Dense(fc1, fc2), Relu(),
        Dense(fc2, class_count),
    )
    return NetworkSpec(layers, class_count, (size, size, channels))


def _background(size, angle_deg, tint, rng):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = np.deg2rad(angle_deg)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * (np.cos(theta) * xx + np.sin(theta) * yy) / 8.0 + phase)
    base = np.empty((size, size, 3))
    base[:] = tint
    base += 0.10 * wave[:, :, None]
    base += rng.normal(0.0, 0.015, size=(size, size, 3))
    return base


def _object_mask(cls, size, cx, cy, radius):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    rr = np.hypot(dx, dy)
    inside = rr <= radius
    if cls == 0:    # hbars: horizontal stripes within the disc
        return inside & (np.floor(dy / 4.0).astype(int) % 2 == 0)
    if cls == 1:    # vbars
        return inside & (np.floor(dx / 4.0).astype(int) % 2 == 0)
    if cls == 2:    # diag stripes
        return inside & (np.floor((dx + dy) / 5.0).astype(int) % 2 == 0)
    if cls == 3:    # filled disc
        return inside
    if cls == 4:    # ring
        return inside & (rr >= radius * 0.55)
    # dots: lattice of small discs
    gx = np.abs((dx + radius) % (radius * 0.9) - radius * 0.45)
    gy = np.abs((dy + radius) % (radius * 0.9) - radius * 0.45)
    return inside & (np.hypot(gx, gy) <= radius * 0.22)


@dataclass(frozen=True)
class SceneDataset:
    images: np.ndarray   # (N, H, W, 3) in [0, 1]
    labels: np.ndarray   # (N,)
    themes: np.ndarray   # (N,)
    sizes: np.ndarray    # (N,) 0 = small, 1 = large
    object_boxes: np.ndarray  # (N, 4) row0, col0, rows, cols covering the object


def generate_scene_dataset(n_per_class: int, seed: int, size: int = 64) -> SceneDataset:
    """Deterministic labeled scenes; see the module docstring for the factors."""
    if n_per_class <= 0:
        raise ValidationError("n_per_class must be positive")
    rng = np.random.default_rng(seed)
    angles = (0, 30, 60, 90, 120, 150)
    images, labels, themes, sizes, boxes = [], [], [], [], []
    for cls in range(len(SCENE_CLASSES)):
        for _ in range(n_per_class):
            theme = int(rng.integers(len(SCENE_THEMES)))
            big = int(rng.integers(2))
            fg, tint = SCENE_THEMES[theme]
            img = _background(size, angles[cls], tint, rng)
            radius = 16.0 if big else 10.0
            cx = size / 2 + rng.uniform(-6, 6)
            cy = size / 2 + rng.uniform(-6, 6)
            mask = _object_mask(cls, size, cx, cy, radius)
            img[mask] = np.asarray(fg) + rng.normal(0.0, 0.02, 3)
            r0 = max(int(np.floor(cy - radius)) - 1, 0)
            c0 = max(int(np.floor(cx - radius)) - 1, 0)
            r1 = min(int(np.ceil(cy + radius)) + 1, size - 1)
            c1 = min(int(np.ceil(cx + radius)) + 1, size - 1)
            images.append(np.clip(img, 0.0, 1.0))
            labels.append(cls)
            themes.append(theme)
            sizes.append(big)
            boxes.append((r0, c0, r1 - r0 + 1, c1 - c0 + 1))
    order = rng.permutation(len(images))
    return SceneDataset(
        images=np.stack(images)[order],
        labels=np.asarray(labels, dtype=np.int64)[order],
        themes=np.asarray(themes, dtype=np.int64)[order],
        sizes=np.asarray(sizes, dtype=np.int64)[order],
        object_boxes=np.asarray(boxes, dtype=np.int64)[order],
    )


def generate_separable_dataset(n_per_class: int, seed: int, size: int = 8):
    """Two classes split by overall brightness; linearly separable by design."""
    rng = np.random.default_rng(seed)
    n = 2 * n_per_class
    images = np.empty((n, size, size, 3))
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        cls = i % 2
        level = 0.25 if cls == 0 else 0.75
        images[i] = level + rng.normal(0.0, 0.05, (size, size, 3))
        labels[i] = cls
    return np.clip(images, 0.0, 1.0), labels


# ---------------------------------------------------------------------------
# dataset statistics (whitening and mean-image fills)

STD_FLOOR = 1e-6


@dataclass(frozen=True)
class DatasetStats:
    mean: np.ndarray        # (C,) per-channel mean
    std: np.ndarray         # (C,) per-channel std, floored at STD_FLOOR
    mean_image: np.ndarray  # (H, W, C) per-pixel mean
    clamped: bool = False


def compute_dataset_stats(images) -> DatasetStats:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or len(images) == 0:
        raise ValidationError("need a non-empty (N, H, W, C) stack")
    std = images.std(axis=(0, 1, 2))
    clamped = bool(np.any(std < STD_FLOOR))
    return DatasetStats(
        mean=images.mean(axis=(0, 1, 2)),
        std=np.maximum(std, STD_FLOOR),
        mean_image=images.mean(axis=0),
        clamped=clamped,
    )
