"""Procedural stand-in dataset with a planted, localised class feature.

Each class is a textured disc of a class-specific colour and stripe
frequency, placed (with jitter) inside a class-specific image quadrant
over a noisy background shared by all classes. Colour and texture make
classes separable after global pooling; the quadrant makes the evidence
spatially localised, which the CAM tests rely on.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .dataset import SPLITS, FewShotDataset, ImageSample

PALETTE = np.array(
    [
        [0.85, 0.20, 0.15],
        [0.15, 0.70, 0.20],
        [0.20, 0.30, 0.90],
        [0.90, 0.80, 0.10],
        [0.70, 0.20, 0.80],
        [0.10, 0.80, 0.80],
        [0.95, 0.55, 0.10],
        [0.45, 0.25, 0.10],
    ]
)
STRIPE_FREQ = (3.0, 7.0, 5.0, 9.0, 4.0, 8.0, 6.0, 10.0)
STRIPE_ANGLE = (0.0, 45.0, 90.0, 135.0, 22.5, 67.5, 112.5, 157.5)


def class_name(i: int) -> str:
    return f"class_{i}"


def quadrant_of(class_index: int) -> int:
    """0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right."""
    return class_index % 4


def quadrant_box(quadrant: int, size: int) -> tuple[int, int, int, int]:
    """(row0, row1, col0, col1), half-open, of a quadrant in pixel coordinates."""
    half = size // 2
    r0 = 0 if quadrant in (0, 1) else half
    c0 = 0 if quadrant in (0, 2) else half
    return r0, r0 + half, c0, c0 + half


def render(class_index: int, size: int, rng: np.random.Generator, strength: float = 1.0) -> np.ndarray:
    """One (3,size,size) image in [0,1]; ``strength`` scales the disc opacity."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    smooth = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=size / 10.0)
    smooth *= 0.08 / (smooth.std() + 1e-12)
    bg = 0.45 + smooth + rng.normal(0.0, 0.04, (3, size, size))

    r0, r1, c0, c1 = quadrant_box(quadrant_of(class_index), size)
    jitter = size / 16.0
    cy = (r0 + r1 - 1) / 2.0 + rng.uniform(-jitter, jitter)
    cx = (c0 + c1 - 1) / 2.0 + rng.uniform(-jitter, jitter)
    radius = size * 0.17 * rng.uniform(0.9, 1.1)
    alpha = strength / (1.0 + np.exp(-(radius - np.hypot(yy - cy, xx - cx)) / 0.8))

    k = class_index % len(PALETTE)
    th = np.deg2rad(STRIPE_ANGLE[k])
    phase = rng.uniform(0, 2 * np.pi)
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * STRIPE_FREQ[k] * (xx * np.cos(th) + yy * np.sin(th)) / size + phase)
    color = np.clip(PALETTE[k] + rng.normal(0.0, 0.04, 3), 0.0, 1.0)
    disc = color[:, None, None] * (0.55 + 0.45 * stripes)[None]
    img = (1.0 - alpha) * bg + alpha * disc
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def split_sizes(per_class: int) -> tuple[int, int, int]:
    n_train = int(round(0.70 * per_class))
    n_val = int(round(0.15 * per_class))
    return n_train, n_val, per_class - n_train - n_val


def synth_generate(n_classes: int = 4, per_class: int = 100, image_size: int = 64, seed: int = 0) -> FewShotDataset:
    if n_classes < 2:
        raise ValueError("synthetic datasets need at least 2 classes")
    if per_class < 3:
        raise ValueError("per_class must allow a non-empty train/val/test split")
    classes = [class_name(i) for i in range(n_classes)]
    bounds = np.cumsum((0,) + split_sizes(per_class))
    samples: dict[str, dict[str, list[ImageSample]]] = {s: {} for s in SPLITS}
    for ci, cls in enumerate(classes):
        for si, split in enumerate(SPLITS):
            items = []
            for idx in range(bounds[si], bounds[si + 1]):
                rng = np.random.default_rng(np.random.SeedSequence([seed, ci, idx]))
                items.append(ImageSample(f"{split}/{cls}/{idx:04d}", render(ci, image_size, rng), cls, split))
            samples[split][cls] = items
    return FewShotDataset(classes=classes, samples=samples, image_size=image_size)


def planted_query(class_index: int, image_size: int = 64, seed: int = 0, strength: float = 0.5) -> ImageSample:
    """A probe image whose class evidence is a faint disc in the class quadrant."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, class_index, 10**6]))
    cls = class_name(class_index)
    return ImageSample(f"probe/{cls}/{seed:04d}", render(class_index, image_size, rng, strength), cls, "test")


def nearest_centroid_accuracy(ds: FewShotDataset, fit_split: str = "train", eval_split: str = "test") -> float:
    """Separability oracle: raw-pixel nearest-centroid accuracy."""
    cents = np.stack(
        [np.mean([s.pixels.ravel() for s in ds.samples[fit_split][c]], axis=0) for c in ds.classes]
    )
    correct = total = 0
    for ci, c in enumerate(ds.classes):
        for s in ds.samples[eval_split][c]:
            d = ((cents - s.pixels.ravel()) ** 2).sum(axis=1)
            correct += int(np.argmin(d) == ci)
            total += 1
    return correct / total
