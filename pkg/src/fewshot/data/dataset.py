"""Image samples, datasets and on-disk ingestion.

On-disk layout is ``<root>/<split>/<class>/<file>`` with splits
``train``, ``val`` and ``test``. Every class must appear in every split.
"""

from __future__ import annotations

import hashlib
import io
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from ..errors import DecodeError, LayoutError

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
MAX_PER_CLASS = 5000
DEFAULT_IMAGE_SIZE = 64


@dataclass(frozen=True, eq=False)
class ImageSample:
    id: str
    pixels: np.ndarray  # (3, H, W) float32 in [0, 1]
    class_label: str
    split: str


@dataclass(eq=False)
class FewShotDataset:
    classes: list[str]
    samples: dict[str, dict[str, list[ImageSample]]]
    image_size: int
    manifest_hash: str = field(default="")

    def __post_init__(self):
        if not self.manifest_hash:
            self.manifest_hash = dataset_hash(self)

    def split(self, name: str) -> dict[str, list[ImageSample]]:
        return self.samples[name]

    def count(self, split: str | None = None) -> int:
        splits = [split] if split else list(self.samples)
        return sum(len(v) for s in splits for v in self.samples[s].values())

    def counts(self) -> dict[str, dict[str, int]]:
        return {s: {c: len(v) for c, v in per.items()} for s, per in self.samples.items()}


def dataset_hash(ds: FewShotDataset) -> str:
    h = hashlib.sha256()
    h.update(f"{ds.image_size}|{','.join(ds.classes)}".encode())
    for split in sorted(ds.samples):
        for cls in ds.classes:
            for s in ds.samples[split].get(cls, []):
                h.update(s.id.encode())
                h.update(np.ascontiguousarray(s.pixels, dtype=np.float32).tobytes())
    return h.hexdigest()


def resize_chw(pixels: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of a (C,H,W) float image."""
    if pixels.shape[1:] == (size, size):
        return pixels.astype(np.float32, copy=False)
    chans = [
        np.asarray(Image.fromarray(c.astype(np.float32), mode="F").resize((size, size), Image.BILINEAR))
        for c in pixels
    ]
    return np.stack(chans).astype(np.float32)


def decode_image(path: Path, image_size: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"cannot decode image {path}: {exc}") from exc
    return np.clip(resize_chw(arr.transpose(2, 0, 1), image_size), 0.0, 1.0)


def scan_layout(root: str | Path) -> dict[str, dict[str, list[Path]]]:
    """Validate the directory tree and list image files per split and class."""
    root = Path(root)
    if not root.is_dir():
        raise LayoutError(f"dataset root {root} is not a directory")
    files: dict[str, dict[str, list[Path]]] = {}
    for split in SPLITS:
        sdir = root / split
        if not sdir.is_dir():
            raise LayoutError(f"missing split directory: {sdir}")
        per: dict[str, list[Path]] = {}
        for cdir in sorted(p for p in sdir.iterdir() if p.is_dir()):
            imgs = sorted(p for p in cdir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
            if not imgs:
                raise LayoutError(f"empty class folder: {cdir}")
            per[cdir.name] = imgs
        if not per:
            raise LayoutError(f"split {sdir} has no class folders")
        files[split] = per
    names = {s: set(per) for s, per in files.items()}
    all_classes = set().union(*names.values())
    for split, present in names.items():
        missing = all_classes - present
        if missing:
            raise LayoutError(f"classes {sorted(missing)} absent from split {root / split}")
    for cls in sorted(all_classes):
        total = sum(len(files[s][cls]) for s in SPLITS)
        if total > MAX_PER_CLASS:
            warnings.warn(f"class {cls!r} has {total} images, above the {MAX_PER_CLASS} per-class cap")
    return files


def scan_dataset(root: str | Path, image_size: int = DEFAULT_IMAGE_SIZE) -> FewShotDataset:
    root = Path(root)
    files = scan_layout(root)
    classes = sorted(files["train"])
    samples: dict[str, dict[str, list[ImageSample]]] = {}
    for split in SPLITS:
        samples[split] = {}
        for cls in classes:
            samples[split][cls] = [
                ImageSample(
                    id=p.relative_to(root).as_posix(),
                    pixels=decode_image(p, image_size),
                    class_label=cls,
                    split=split,
                )
                for p in files[split][cls]
            ]
    log.info("scanned %s: %d classes, %d images", root, len(classes), sum(len(v) for f in files.values() for v in f.values()))
    return FewShotDataset(classes=classes, samples=samples, image_size=image_size)


def encode_png(pixels: np.ndarray) -> bytes:
    """(3,H,W) float in [0,1] -> PNG bytes, no metadata."""
    arr = np.clip(np.rint(pixels.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def write_dataset(ds: FewShotDataset, root: str | Path) -> Path:
    """Write a dataset in the standard layout as PNG files."""
    root = Path(root)
    for split, per in ds.samples.items():
        for cls, items in per.items():
            d = root / split / cls
            d.mkdir(parents=True, exist_ok=True)
            for s in items:
                (d / f"{Path(s.id).name}.png").write_bytes(encode_png(s.pixels))
    return root


def preprocess(sample: ImageSample | np.ndarray, image_size: int | None = None) -> np.ndarray:
    """Resize (bilinear) and standardise with mean 0.5 / std 0.5 per channel."""
    pixels = sample.pixels if isinstance(sample, ImageSample) else np.asarray(sample, dtype=np.float32)
    size = image_size or pixels.shape[-1]
    return ((resize_chw(pixels, size) - 0.5) / 0.5).astype(np.float32)
