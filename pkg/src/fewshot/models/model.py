"""Head + encoder bundles used by the training loops, checkpoints and CLI."""

from __future__ import annotations

import numpy as np

from ..data.sampling import EpisodeBatch
from ..numcore import Module, Parameter, Tensor, no_grad
from . import heads
from .encoders import EncoderConfig, build_encoder

HEADS = ("siamese", "relation", "matching", "proto", "hybrid")

DEFAULT_FEATURE_DIM = {"siamese": 64, "relation": 64, "matching": 64, "proto": 64, "hybrid": 512}


def encoder_kind(head: str) -> str:
    return "siamese_cnn" if head == "siamese" else "residual"


class FewShotModel(Module):
    def __init__(
        self,
        head: str,
        image_size: int = 64,
        feature_dim: int | None = None,
        seed: int = 0,
        channels: tuple[int, ...] | None = None,
        relation_hidden: int = 32,
        dtype=np.float32,
    ):
        super().__init__()
        if head not in HEADS:
            raise ValueError(f"unknown head {head!r}; expected one of {HEADS}")
        object.__setattr__(self, "head", head)
        kind = encoder_kind(head)
        if channels is None:
            channels = (16, 32) if kind == "siamese_cnn" else (16, 16, 32, 64)
        cfg = EncoderConfig(
            kind=kind,
            image_size=image_size,
            feature_dim=feature_dim or DEFAULT_FEATURE_DIM[head],
            channels=tuple(channels),
            seed=seed,
        )
        object.__setattr__(self, "config", cfg)
        object.__setattr__(self, "relation_hidden", relation_hidden)
        self.encoder = build_encoder(cfg, dtype)
        if head == "relation":
            self.relation = heads.RelationModule(cfg.channels[-1], relation_hidden, seed, dtype)

    def describe(self) -> dict:
        return {
            "head": self.head,
            "encoder_kind": self.config.kind,
            "feature_dim": self.config.feature_dim,
            "image_size": self.config.image_size,
            "channels": list(self.config.channels),
            "relation_hidden": self.relation_hidden,
        }

    def trainable_parameters(self) -> list[Parameter]:
        # the relation head compares feature maps; the encoder's embedding layer is unused
        skip = "encoder.fc." if self.head == "relation" else None
        return [p for n, p in self.named_parameters() if not (skip and n.startswith(skip))]

    # --- episodic heads ---------------------------------------------------
    def episode_loss(self, batch: EpisodeBatch) -> tuple[Tensor, np.ndarray]:
        if self.head == "proto":
            loss, res = heads.proto_episode_loss(batch, self.encoder)
        elif self.head == "hybrid":
            loss, res = heads.hybrid_loss(batch, self.encoder)
        elif self.head == "matching":
            loss, res = heads.matching_loss(batch, self.encoder)
        elif self.head == "relation":
            res = heads.relation_forward(batch, self.encoder, self.relation)
            loss = heads.relation_loss(res)
        else:
            raise ValueError("the siamese head trains on triplets, not episodes")
        return loss, res.predictions

    def predict_episode(self, batch: EpisodeBatch) -> np.ndarray:
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                _, preds = self.episode_loss(batch)
        finally:
            self.train(was_training)
        return preds

    # --- siamese ----------------------------------------------------------
    def triplet_loss(self, anchor, positive, negative, margin: float) -> Tensor:
        return heads.siamese_triplet_step(anchor, positive, negative, self.encoder, margin)

    def pair_eval(self, anchor, positive, negative) -> heads.PairEval:
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                return heads.siamese_pair_eval(anchor, positive, negative, self.encoder)
        finally:
            self.train(was_training)


def build_model(head: str, **kwargs) -> FewShotModel:
    return FewShotModel(head, **kwargs)


def model_from_description(desc: dict, seed: int = 0) -> FewShotModel:
    return FewShotModel(
        desc["head"],
        image_size=desc["image_size"],
        feature_dim=desc["feature_dim"],
        seed=seed,
        channels=tuple(desc["channels"]),
        relation_hidden=desc.get("relation_hidden", 32),
    )
