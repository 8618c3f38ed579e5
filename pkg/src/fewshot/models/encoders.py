"""Image encoders: the two-block Siamese CNN and a small residual network.

Both return an :class:`EncoderOutput` holding the last convolutional
feature map and the embedding. The residual encoder is trained from
scratch; its downsampling plan (stem at full resolution, three stride-2
blocks) leaves a feature map of side ``image_size // 8``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numcore import BatchNorm2d, Conv2d, Linear, Module, ShapeError, Tensor
from ..numcore import ops

ENCODER_KINDS = ("siamese_cnn", "residual")


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "residual"
    image_size: int = 64
    feature_dim: int = 512
    channels: tuple[int, ...] = (16, 16, 32, 64)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.feature_dim <= 0:
            raise ValueError("feature_dim must be positive")
        if self.image_size % 8:
            raise ValueError("image_size must be divisible by 8")

    @property
    def exposes_feature_map(self) -> bool:
        return self.kind == "residual"


@dataclass
class EncoderOutput:
    feature_map: Tensor | None
    embedding: Tensor


class SiameseCNN(Module):
    """[conv -> BN -> relu -> maxpool] x 2 -> flatten -> linear."""

    def __init__(self, config: EncoderConfig, dtype=np.float32):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.seed)
        c1, c2 = config.channels[:2]
        self.conv1 = Conv2d(3, c1, 3, padding=1, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(c1, dtype=dtype)
        self.conv2 = Conv2d(c1, c2, 3, padding=1, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(c2, dtype=dtype)
        side = config.image_size // 4
        self.fc = Linear(c2 * side * side, config.feature_dim, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> EncoderOutput:
        _check_input(x, self.config.image_size)
        h = ops.maxpool2d(ops.relu(self.bn1(self.conv1(x))))
        h = ops.maxpool2d(ops.relu(self.bn2(self.conv2(h))))
        return EncoderOutput(feature_map=h, embedding=self.fc(ops.flatten(h)))


class ResidualBlock(Module):
    def __init__(self, cin, cout, stride, rng, dtype=np.float32):
        super().__init__()
        self.conv1 = Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(cout, dtype=dtype)
        self.conv2 = Conv2d(cout, cout, 3, padding=1, bias=False, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(cout, dtype=dtype)
        if stride != 1 or cin != cout:
            self.down = Conv2d(cin, cout, 1, stride=stride, bias=False, rng=rng, dtype=dtype)
            self.down_bn = BatchNorm2d(cout, dtype=dtype)
        else:
            self.down = None

    def forward(self, x: Tensor) -> Tensor:
        h = ops.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        skip = x if self.down is None else self.down_bn(self.down(x))
        return ops.relu(h + skip)


class ResidualEncoder(Module):
    """Stem conv then three stride-2 residual blocks, GAP, linear."""

    def __init__(self, config: EncoderConfig, dtype=np.float32):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.seed)
        c0, c1, c2, c3 = config.channels
        self.stem = Conv2d(3, c0, 3, padding=1, bias=False, rng=rng, dtype=dtype)
        self.stem_bn = BatchNorm2d(c0, dtype=dtype)
        self.block1 = ResidualBlock(c0, c1, 2, rng, dtype)
        self.block2 = ResidualBlock(c1, c2, 2, rng, dtype)
        self.block3 = ResidualBlock(c2, c3, 2, rng, dtype)
        self.fc = Linear(c3, config.feature_dim, rng=rng, dtype=dtype)

    def features(self, x: Tensor) -> Tensor:
        _check_input(x, self.config.image_size)
        h = ops.relu(self.stem_bn(self.stem(x)))
        return self.block3(self.block2(self.block1(h)))

    def head(self, feature_map: Tensor) -> Tensor:
        return self.fc(ops.global_avg_pool(feature_map))

    def forward(self, x: Tensor) -> EncoderOutput:
        fmap = self.features(x)
        return EncoderOutput(feature_map=fmap, embedding=self.head(fmap))


def _check_input(x: Tensor, size: int) -> None:
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (size, size):
        raise ShapeError(f"encoder expects (B,3,{size},{size}) input, got {x.shape}")


def build_encoder(config: EncoderConfig, dtype=np.float32) -> Module:
    if config.kind == "siamese_cnn":
        return SiameseCNN(config, dtype)
    return ResidualEncoder(config, dtype)


def siamese_param_count(image_size: int, c1: int, c2: int, feature_dim: int) -> int:
    """Closed-form parameter count of :class:`SiameseCNN`."""
    conv1 = 3 * c1 * 9 + c1
    bn1 = 2 * c1
    conv2 = c1 * c2 * 9 + c2
    bn2 = 2 * c2
    side = image_size // 4
    fc = c2 * side * side * feature_dim + feature_dim
    return conv1 + bn1 + conv2 + bn2 + fc
