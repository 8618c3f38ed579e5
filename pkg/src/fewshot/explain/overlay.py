"""Heatmap overlays and batch explanation runs."""

from __future__ import annotations

import io
import json
import re
from pathlib import Path

import numpy as np
from PIL import Image

from ..data.dataset import IMAGE_SUFFIXES, FewShotDataset
from ..data.sampling import episode_batch, sample_episode
from ..models.model import FewShotModel
from .cam import METHODS, CAMWrapper, Heatmap

ALPHA = 0.45


def color_ramp(h: np.ndarray) -> np.ndarray:
    """Linear blue (0) to red (1) ramp, returned as (3, H, W)."""
    return np.stack([h, np.zeros_like(h), 1.0 - h])


def blend(heatmap: np.ndarray, pixels: np.ndarray, alpha: float = ALPHA) -> np.ndarray:
    return (1.0 - alpha) * pixels.astype(np.float64) + alpha * color_ramp(np.asarray(heatmap, dtype=np.float64))


def render_overlay(heatmap: Heatmap | np.ndarray, pixels: np.ndarray) -> bytes:
    h = heatmap.normalized if isinstance(heatmap, Heatmap) else heatmap
    if h.shape != pixels.shape[1:]:
        raise ValueError(f"heatmap {h.shape} does not match image {pixels.shape[1:]}")
    img = np.clip(np.rint(blend(h, pixels).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    try:
        Image.fromarray(img, mode="RGB").save(buf, format="PNG", optimize=False)
    except OSError as exc:  # pragma: no cover - PIL encoder failure
        raise OSError(f"PNG encode failed: {exc}") from exc
    return buf.getvalue()


def safe_id(s: str) -> str:
    """File-name-safe form of a sample id, without any image suffix."""
    stem, dot, ext = s.rpartition(".")
    if dot and "." + ext.lower() in IMAGE_SUFFIXES:
        s = stem
    return re.sub(r"[^A-Za-z0-9._-]+", "-", s).strip("-")


def explain_episode(
    model: FewShotModel,
    dataset: FewShotDataset,
    out_dir: str | Path,
    methods=METHODS,
    n_way: int = 4,
    k_shot: int = 5,
    q_query: int = 2,
    seed: int = 0,
    split: str = "test",
) -> list[dict]:
    """Sample one episode and write an overlay per (query, method, class).

    Files are named ``<query_id>__<method>__<class_name>.png``; an
    ``index.json`` lists every request and its output file.
    """
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown CAM method {m!r}; expected one of {METHODS}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    ep = sample_episode(dataset, split, n_way, k_shot, q_query, rng)
    batch = episode_batch(ep, dataset.image_size)
    wrapper = CAMWrapper.from_support(model.encoder, batch, dataset.image_size)
    index = []
    for (sample, label), x in zip(ep.query, batch.query):
        for method in methods:
            for d in range(ep.n_way):
                hm = wrapper.heatmap(method, x, d)
                name = f"{safe_id(sample.id)}__{method}__{safe_id(ep.class_map[d])}.png"
                (out / name).write_bytes(render_overlay(hm, sample.pixels))
                index.append({
                    "query_id": sample.id,
                    "true_class": ep.class_map[label],
                    "method": method,
                    "class_index": d,
                    "class_name": ep.class_map[d],
                    "degenerate": hm.degenerate,
                    "file": name,
                })
    (out / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return index
