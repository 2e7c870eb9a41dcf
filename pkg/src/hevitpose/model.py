"""Three-stage pyramid backbone, upsampling head, and the T/S/B family.

The backbone emits feature maps at 1/4, 1/8, and 1/16 of the input size;
only the last feeds the head, which restores 1/4 resolution with two
transposed convolutions and regresses one heatmap channel per keypoint.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .attention import AttnConfig, BlockConfig, ConfigError, EncoderBlock
from .layers import ChannelLayerNorm, Conv2d, ConvTranspose2d
from .params import ParamStore
from .patch_embed import DEFAULT_STEM, Downsample, EmbedSpec, Stem
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    channels: tuple[int, int, int] = (128, 256, 384)
    depths: tuple[int, int, int] = (4, 4, 4)
    groups: tuple[int, int, int] = (4, 4, 4)
    ratios: tuple[int, int, int] = (8, 4, 2)
    heads: tuple[int, int, int] = (2, 4, 8)
    ffn_ratios: tuple[float, float, float] = (2.0, 2.0, 2.0)
    stem: tuple[EmbedSpec, ...] = DEFAULT_STEM
    head_channels: tuple[int, int] = (256, 256)
    keypoints: int = 16
    input_hw: tuple[int, int] = (256, 256)

    def ffn_hidden(self, stage: int) -> int:
        return int(round(self.ffn_ratios[stage] * self.channels[stage]))

    def stage_hw(self, stage: int) -> tuple[int, int]:
        h, w = self.input_hw
        f = 4 * (2 ** stage)
        return h // f, w // f

    def validate(self) -> None:
        h, w = self.input_hw
        if h % 16 or w % 16:
            raise ConfigError(f"input size {h}x{w} not divisible by 16")
        for i in range(3):
            c, g, r, hd = self.channels[i], self.groups[i], self.ratios[i], self.heads[i]
            AttnConfig(c, g, r, hd)  # raises with the failing constraint named
            sh, sw = self.stage_hw(i)
            if sh % r or sw % r:
                raise ConfigError(
                    f"stage {i + 1}: ratio {r} does not divide the {sh}x{sw} feature map")
            if self.depths[i] < 1:
                raise ConfigError(f"stage {i + 1}: depth must be >= 1")
            if self.ffn_ratios[i] < 1:
                raise ConfigError(f"stage {i + 1}: ffn ratio must be >= 1")
        if self.keypoints < 1:
            raise ConfigError("keypoint count must be >= 1")


# Family settings: stage widths/depths/ratios from the published family
# table, the balanced group/head assignment, and feed-forward widths plus
# head widths chosen to land each variant on its published budget.
PRESETS: dict[str, ModelConfig] = {
    "T": ModelConfig(channels=(64, 128, 192), depths=(4, 4, 4),
                     ffn_ratios=(1.25, 1.25, 2.0), head_channels=(48, 48)),
    "S": ModelConfig(channels=(128, 192, 224), depths=(4, 3, 2),
                     ffn_ratios=(1.0, 1.25, 5.0), head_channels=(64, 64)),
    "B": ModelConfig(channels=(128, 256, 384), depths=(4, 4, 4),
                     ffn_ratios=(1.0, 1.0, 1.0), head_channels=(160, 160)),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(cfg, **overrides) if overrides else cfg


@dataclass
class PyramidFeatures:
    stage1: Tensor
    stage2: Tensor
    stage3: Tensor

    def __iter__(self):
        return iter((self.stage1, self.stage2, self.stage3))


class Stage:
    def __init__(self, store: ParamStore, name: str, cfg: ModelConfig, stage: int,
                 seed: int, dtype=np.float32):
        c = cfg.channels[stage]
        if stage == 0:
            self.entry = Stem(store, f"{name}.embed", cfg.stem, c, seed, dtype=dtype)
        else:
            self.entry = Downsample(store, f"{name}.down", cfg.channels[stage - 1], c, seed, dtype=dtype)
        attn = AttnConfig(c, cfg.groups[stage], cfg.ratios[stage], cfg.heads[stage])
        block_cfg = BlockConfig(attn, cfg.ffn_hidden(stage))
        self.blocks = [EncoderBlock(store, f"{name}.block{i}", block_cfg, seed, dtype=dtype)
                       for i in range(cfg.depths[stage])]

    def __call__(self, x: Tensor) -> Tensor:
        x = self.entry(x)
        for block in self.blocks:
            x = block(x)
        return x


class PoseHead:
    """Two stride-2 transposed convs (norm + relu after each), then 1x1."""

    def __init__(self, store: ParamStore, name: str, cin: int,
                 widths: tuple[int, int], keypoints: int, seed: int, dtype=np.float32):
        d1, d2 = widths
        self.deconv0 = ConvTranspose2d(store, f"{name}.deconv0", cin, d1, 4, seed,
                                       stride=2, padding=1, dtype=dtype)
        self.norm0 = ChannelLayerNorm(store, f"{name}.norm0", d1, dtype=dtype)
        self.deconv1 = ConvTranspose2d(store, f"{name}.deconv1", d1, d2, 4, seed,
                                       stride=2, padding=1, dtype=dtype)
        self.norm1 = ChannelLayerNorm(store, f"{name}.norm1", d2, dtype=dtype)
        self.out = Conv2d(store, f"{name}.out", d2, keypoints, 1, seed, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        x = T.relu(self.norm0(self.deconv0(x)))
        x = T.relu(self.norm1(self.deconv1(x)))
        return self.out(x)


class HEViTPose:
    """Built model: parameter store plus executable forward passes."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        self.dtype = dtype
        self.params = ParamStore()
        self.stages = [Stage(self.params, f"stage{i + 1}", cfg, i, seed, dtype=dtype)
                       for i in range(3)]
        self.head = PoseHead(self.params, "head", cfg.channels[2],
                             cfg.head_channels, cfg.keypoints, seed, dtype=dtype)

    def _check_input(self, x: Tensor) -> None:
        if x.ndim != 3 or x.shape[0] != 3:
            raise T.ShapeError(f"expected (3,H,W) input, got {x.shape}")
        if x.shape[1] % 16 or x.shape[2] % 16:
            raise T.ShapeError(f"input {x.shape[1]}x{x.shape[2]} not divisible by 16")

    def forward_backbone(self, x: Tensor) -> PyramidFeatures:
        self._check_input(x)
        f1 = self.stages[0](x)
        f2 = self.stages[1](f1)
        f3 = self.stages[2](f2)
        return PyramidFeatures(f1, f2, f3)

    def forward_head(self, feats: PyramidFeatures) -> Tensor:
        return self.head(feats.stage3)

    def forward(self, x: Tensor) -> Tensor:
        return self.forward_head(self.forward_backbone(x))

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)


def build_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> HEViTPose:
    return HEViTPose(cfg, seed=seed, dtype=dtype)
