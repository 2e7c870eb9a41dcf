"""Cascaded group attention with spatially reduced keys and values.

The input map is split channel-wise into groups processed in sequence: each
group adds the previous group's output to its own slice before attending, so
later groups refine what earlier ones produced.  Within a group, queries
come from the full token grid while keys and values come from a grid shrunk
by a learned strided convolution, cutting the attention cost by the square
of the reduction ratio.  Group outputs are concatenated and mixed by a full
channel projection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import (Conv2d, FeedForward, LayerNorm, Linear, ResidualDWConv,
                     map_to_tokens, tokens_to_map)
from .params import ParamStore
from .tensor import Tensor


class ConfigError(ValueError):
    """A divisibility or sizing constraint failed; message names it."""


@dataclass(frozen=True)
class AttnConfig:
    channels: int
    groups: int
    ratio: int
    heads: int

    def __post_init__(self):
        if self.channels % self.groups:
            raise ConfigError(f"channels {self.channels} not divisible by groups {self.groups}")
        gc = self.channels // self.groups
        if gc % self.heads:
            raise ConfigError(f"group width {gc} not divisible by heads {self.heads}")
        if self.ratio < 1:
            raise ConfigError(f"reduction ratio must be >= 1, got {self.ratio}")

    @property
    def group_channels(self) -> int:
        return self.channels // self.groups

    @property
    def head_dim(self) -> int:
        return self.group_channels // self.heads


@dataclass(frozen=True)
class BlockConfig:
    attn: AttnConfig
    ffn_hidden: int
    ffn_pre: int = 1
    ffn_post: int = 1

    def __post_init__(self):
        if self.ffn_hidden < self.attn.channels:
            raise ConfigError(f"ffn hidden width {self.ffn_hidden} below channel "
                              f"count {self.attn.channels} (expansion ratio >= 1)")
        if self.ffn_pre < 1 or self.ffn_post < 1:
            raise ConfigError("need at least one feed-forward on each side of attention")


class SpatialReduction:
    """Learned conv (kernel=stride=ratio) + token LayerNorm; ratio 1 is 1x1."""

    def __init__(self, store: ParamStore, name: str, channels: int, ratio: int,
                 seed: int, dtype=np.float32):
        self.ratio = ratio
        self.conv = Conv2d(store, f"{name}.conv", channels, channels, ratio, seed,
                           stride=ratio, padding=0, dtype=dtype)
        self.norm = LayerNorm(store, f"{name}.norm", channels, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        """(C,H,W) -> reduced tokens (H*W/r^2, C), already normalized."""
        _, h, w = x.shape
        if h % self.ratio or w % self.ratio:
            raise T.ShapeError(f"ratio {self.ratio} does not divide map {h}x{w}")
        y = self.conv(x)
        return self.norm(map_to_tokens(y))


class GroupAttention:
    """Multi-head attention of one cascade group over its channel slice.

    Queries see all H*W tokens; keys/values see the reduced grid.  Output
    token count therefore equals the input's, and the map shape is restored.
    """

    def __init__(self, store: ParamStore, name: str, cfg: AttnConfig, seed: int, dtype=np.float32):
        gc = cfg.group_channels
        self.cfg = cfg
        self.q = Linear(store, f"{name}.q", gc, gc, seed, dtype=dtype)
        self.k = Linear(store, f"{name}.k", gc, gc, seed, dtype=dtype)
        self.v = Linear(store, f"{name}.v", gc, gc, seed, dtype=dtype)
        self.sr = SpatialReduction(store, f"{name}.sr", gc, cfg.ratio, seed, dtype=dtype)

    def __call__(self, x_g: Tensor) -> Tensor:
        gc, h, w = x_g.shape
        n = h * w
        heads, dim = self.cfg.heads, self.cfg.head_dim

        tokens = map_to_tokens(x_g)
        reduced = self.sr(x_g)
        nr = reduced.shape[0]

        q = T.reshape(self.q(tokens), (n, heads, dim)).permute(1, 0, 2)
        k = T.reshape(self.k(reduced), (nr, heads, dim)).permute(1, 0, 2)
        v = T.reshape(self.v(reduced), (nr, heads, dim)).permute(1, 0, 2)

        logits = T.scale(T.matmul(q, k.permute(0, 2, 1)), 1.0 / np.sqrt(dim))
        attn = T.softmax(logits, axis=-1)
        out = T.matmul(attn, v)
        out = T.reshape(out.permute(1, 0, 2), (n, gc))
        return tokens_to_map(out, h, w)


class CascadedGroupAttention:
    """Channel split -> sequential group attentions -> concat -> projection."""

    def __init__(self, store: ParamStore, name: str, cfg: AttnConfig, seed: int, dtype=np.float32):
        self.cfg = cfg
        self.groups = [GroupAttention(store, f"{name}.group{g}", cfg, seed, dtype=dtype)
                       for g in range(cfg.groups)]
        self.proj = Linear(store, f"{name}.proj", cfg.channels, cfg.channels, seed,
                           zero_init=True, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        c, h, w = x.shape
        if c != self.cfg.channels:
            raise T.ShapeError(f"expected {self.cfg.channels} channels, got {c}")
        gc = self.cfg.group_channels
        slices = T.split(x, [gc] * self.cfg.groups, axis=0)
        outputs = []
        carry = None
        for attn, x_g in zip(self.groups, slices):
            if carry is not None:
                x_g = T.add(x_g, carry)
            carry = attn(x_g)
            outputs.append(carry)
        merged = map_to_tokens(T.concat(outputs, axis=0))
        return tokens_to_map(self.proj(merged), h, w)


class EncoderBlock:
    """Sandwich block: positional DWConv, FFNs around one attention layer.

    Every residual branch's output projection is zero-initialized, so a
    freshly built block is the identity map.
    """

    def __init__(self, store: ParamStore, name: str, cfg: BlockConfig, seed: int, dtype=np.float32):
        c = cfg.attn.channels
        self.cfg = cfg
        self.pos = ResidualDWConv(store, f"{name}.pos", c, seed, dtype=dtype)
        self.ffns_pre = [FeedForward(store, f"{name}.ffn_pre{i}", c, cfg.ffn_hidden, seed, dtype=dtype)
                         for i in range(cfg.ffn_pre)]
        self.attn_norm = LayerNorm(store, f"{name}.attn_norm", c, dtype=dtype)
        self.attn = CascadedGroupAttention(store, f"{name}.attn", cfg.attn, seed, dtype=dtype)
        self.ffns_post = [FeedForward(store, f"{name}.ffn_post{i}", c, cfg.ffn_hidden, seed, dtype=dtype)
                          for i in range(cfg.ffn_post)]

    def __call__(self, x: Tensor) -> Tensor:
        c, h, w = x.shape
        x = self.pos(x)
        for ffn in self.ffns_pre:
            x = T.add(x, tokens_to_map(ffn(map_to_tokens(x)), h, w))
        x = T.add(x, self.attn(self.attn_norm_map(x)))
        for ffn in self.ffns_post:
            x = T.add(x, tokens_to_map(ffn(map_to_tokens(x)), h, w))
        return x

    def attn_norm_map(self, x: Tensor) -> Tensor:
        c, h, w = x.shape
        return tokens_to_map(self.attn_norm(map_to_tokens(x)), h, w)
