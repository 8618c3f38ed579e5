"""Seeded image augmentation.

Randomness is derived from ``(sample.id, epoch)`` alone, so the result for
one sample never depends on which other samples were processed or in what
order.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .dataset import ImageSample, resize_chw


@dataclass(frozen=True)
class AugmentSpec:
    rotation_deg: tuple[float, float] = (-15.0, 15.0)
    zoom: tuple[float, float] = (0.9, 1.1)
    shear_deg: tuple[float, float] = (-8.0, 8.0)
    flip_h: float = 0.5
    brightness: tuple[float, float] = (0.85, 1.15)
    crop_fraction: tuple[float, float] = (0.85, 1.0)

    def __post_init__(self):
        for name in ("rotation_deg", "zoom", "shear_deg", "brightness", "crop_fraction"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: range ({lo}, {hi}) is not ordered")
        if not 0.0 <= self.flip_h <= 1.0:
            raise ValueError("flip_h must be a probability")
        if self.zoom[0] <= 0 or not 0.0 < self.crop_fraction[0] <= self.crop_fraction[1] <= 1.0:
            raise ValueError("zoom must be positive and crop_fraction within (0, 1]")

    @classmethod
    def identity(cls) -> "AugmentSpec":
        return cls((0.0, 0.0), (1.0, 1.0), (0.0, 0.0), 0.0, (1.0, 1.0), (1.0, 1.0))


def rng_for(sample_id: str, epoch: int) -> np.random.Generator:
    digest = hashlib.sha256(f"{sample_id}|{epoch}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def flip_horizontal(pixels: np.ndarray) -> np.ndarray:
    return pixels[:, :, ::-1].copy()


def _affine(pixels: np.ndarray, rot_deg: float, zoom: float, shear_deg: float) -> np.ndarray:
    if rot_deg == 0.0 and zoom == 1.0 and shear_deg == 0.0:
        return pixels
    th, sh = np.deg2rad(rot_deg), np.deg2rad(shear_deg)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    shear = np.array([[1.0, np.tan(sh)], [0.0, 1.0]])
    fwd = rot @ shear * zoom
    inv = np.linalg.inv(fwd)
    h, w = pixels.shape[1:]
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = center - inv @ center
    return np.stack(
        [ndimage.affine_transform(c, inv, offset=offset, order=1, mode="reflect") for c in pixels]
    )


def _crop(pixels: np.ndarray, frac: float, rng: np.random.Generator) -> np.ndarray:
    if frac >= 1.0:
        return pixels
    h, w = pixels.shape[1:]
    ch, cw = max(1, int(round(h * frac))), max(1, int(round(w * frac)))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return resize_chw(pixels[:, top:top + ch, left:left + cw], h)


def augment(sample: ImageSample, spec: AugmentSpec, epoch: int = 0) -> ImageSample:
    rng = rng_for(sample.id, epoch)
    rot = rng.uniform(*spec.rotation_deg)
    zoom = rng.uniform(*spec.zoom)
    shear = rng.uniform(*spec.shear_deg)
    flip = rng.random() < spec.flip_h
    bright = rng.uniform(*spec.brightness)
    frac = rng.uniform(*spec.crop_fraction)

    px = sample.pixels.astype(np.float32, copy=True)
    px = _affine(px, rot, zoom, shear)
    px = _crop(px, frac, rng)
    if flip:
        px = flip_horizontal(px)
    if bright != 1.0:
        px = px * bright
    px = np.clip(px, 0.0, 1.0).astype(np.float32)
    return replace(sample, pixels=px)
