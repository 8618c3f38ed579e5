"""Class activation maps for the prototype heads.

The class score for class ``d`` is the prototype logit, the negative
squared distance from the query embedding to prototype ``d``. Gradient
methods differentiate it with respect to the encoder's last feature map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from ..data.dataset import ImageSample, preprocess
from ..data.sampling import EpisodeBatch
from ..errors import CapabilityError
from ..models.encoders import ResidualEncoder
from ..models.heads import PrototypeSet, compute_prototypes
from ..numcore import Module, Tensor, no_grad

METHODS = ("grad_cam", "grad_cam_pp", "eigen_cam")


@dataclass
class Heatmap:
    raw: np.ndarray  # (H', W') >= 0
    normalized: np.ndarray  # (S, S) in [0, 1]
    method: str
    class_index: int
    alpha: np.ndarray | None = None
    degenerate: bool = False


def cam_class_score(embedding: Tensor, protos: PrototypeSet, d: int) -> Tensor:
    """-||f(query) - p_d||^2 for a single query embedding of shape (1, D)."""
    diff = embedding - protos.prototypes[d:d + 1]
    return -(diff * diff).sum()


def gradcam_weights(grads: np.ndarray) -> np.ndarray:
    """Channel weights: spatial mean of the score gradient."""
    return grads.mean(axis=(1, 2))


def gradcam_pp_weights(grads: np.ndarray, activations: np.ndarray) -> np.ndarray:
    """Grad-CAM++ channel weights (exponential-score closed form)."""
    g2 = grads ** 2
    g3 = g2 * grads
    sum_a = activations.sum(axis=(1, 2))[:, None, None]
    denom = 2.0 * g2 + sum_a * g3
    denom = np.where(denom != 0.0, denom, 1.0)
    a = np.where(grads != 0.0, g2 / denom, 0.0)
    return (np.maximum(grads, 0.0) * a).sum(axis=(1, 2))


def weighted_map(weights: np.ndarray, activations: np.ndarray) -> np.ndarray:
    return np.maximum(np.tensordot(weights, activations, axes=(0, 0)), 0.0)


def eigen_projection(activations: np.ndarray) -> np.ndarray:
    """|first principal spatial component| of the (C, H'W') activation matrix."""
    C, H, W = activations.shape
    M = activations.reshape(C, H * W).astype(np.float64)
    if not np.any(M):
        return np.zeros((H, W))
    _, s, vt = np.linalg.svd(M, full_matrices=False)
    return np.abs(s[0] * vt[0]).reshape(H, W)


def upsample(raw: np.ndarray, size: int) -> np.ndarray:
    im = Image.fromarray(np.ascontiguousarray(raw, dtype=np.float32), mode="F")
    return np.asarray(im.resize((size, size), Image.BILINEAR), dtype=np.float64)


def normalize_heatmap(raw: np.ndarray, size: int) -> tuple[np.ndarray, bool]:
    up = np.maximum(upsample(raw, size), 0.0)
    peak = up.max()
    if not peak > 0:
        return np.zeros((size, size)), True
    return np.clip(up / peak, 0.0, 1.0), False


class CAMWrapper:
    """Frozen encoder plus a fixed support context, exposing per-class scores.

    Lets the single-input CAM machinery act on a model whose output depends
    on both the query and the support set.
    """

    def __init__(self, encoder: Module, prototypes: PrototypeSet, image_size: int):
        if not isinstance(encoder, ResidualEncoder):
            raise CapabilityError("CAM needs an encoder that exposes its last convolutional feature map")
        self.encoder = encoder
        self.prototypes = prototypes
        self.image_size = image_size
        encoder.eval()

    @classmethod
    def from_support(cls, encoder: Module, batch: EpisodeBatch, image_size: int) -> "CAMWrapper":
        if not isinstance(encoder, ResidualEncoder):
            raise CapabilityError("CAM needs an encoder that exposes its last convolutional feature map")
        encoder.eval()
        with no_grad():
            emb = encoder(Tensor(batch.support.astype(encoder.fc.weight.dtype))).embedding
        protos = compute_prototypes(emb, batch.support_labels, batch.n_way, batch.class_map)
        return cls(encoder, PrototypeSet(Tensor(protos.prototypes.data), protos.class_map), image_size)

    def _input(self, query) -> Tensor:
        x = preprocess(query, self.image_size) if isinstance(query, ImageSample) else np.asarray(query)
        if x.ndim == 3:
            x = x[None]
        return Tensor(x.astype(self.encoder.fc.weight.dtype))

    def activations(self, query) -> np.ndarray:
        with no_grad():
            return self.encoder.features(self._input(query)).data[0]

    def scores(self, query) -> np.ndarray:
        with no_grad():
            emb = self.encoder(self._input(query)).embedding
            return np.array([cam_class_score(emb, self.prototypes, d).data.item() for d in range(self.n_way)])

    @property
    def n_way(self) -> int:
        return self.prototypes.prototypes.shape[0]

    def activations_and_grads(self, query, d: int) -> tuple[np.ndarray, np.ndarray, float]:
        if not 0 <= d < self.n_way:
            raise ValueError(f"target class {d} outside [0, {self.n_way})")
        with no_grad():
            fmap = self.encoder.features(self._input(query))
        leaf = Tensor(fmap.data, requires_grad=True)
        score = cam_class_score(self.encoder.head(leaf), self.prototypes, d)
        score.backward()
        self.encoder.zero_grad()
        return leaf.data[0], leaf.grad[0], float(score.data)

    def heatmap(self, method: str, query, d: int) -> Heatmap:
        if method not in METHODS:
            raise ValueError(f"unknown CAM method {method!r}; expected one of {METHODS}")
        alpha = None
        if method == "eigen_cam":
            acts = self.activations(query)
            raw = eigen_projection(acts)
        else:
            acts, grads, _ = self.activations_and_grads(query, d)
            alpha = gradcam_weights(grads) if method == "grad_cam" else gradcam_pp_weights(grads, acts)
            raw = weighted_map(alpha, acts)
        norm, degenerate = normalize_heatmap(raw, self.image_size)
        return Heatmap(raw, norm, method, d, alpha, degenerate)


@dataclass
class CamRequest:
    method: str
    query: ImageSample | np.ndarray
    target_class: int
    context: CAMWrapper

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown CAM method {self.method!r}; expected one of {METHODS}")
        if not 0 <= self.target_class < self.context.n_way:
            raise ValueError(f"target class {self.target_class} outside [0, {self.context.n_way})")


def explain(request: CamRequest) -> Heatmap:
    return request.context.heatmap(request.method, request.query, request.target_class)


def grad_cam(request: CamRequest) -> Heatmap:
    return request.context.heatmap("grad_cam", request.query, request.target_class)


def grad_cam_pp(request: CamRequest) -> Heatmap:
    return request.context.heatmap("grad_cam_pp", request.query, request.target_class)


def eigen_cam(request: CamRequest) -> Heatmap:
    return request.context.heatmap("eigen_cam", request.query, request.target_class)
