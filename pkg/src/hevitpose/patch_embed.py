"""Overlapping patch embedding and inter-stage downsampling.

A stem is a sequence of strided convolutions (optionally a transposed
convolution) whose kernels exceed their strides, so adjacent patch windows
share a strip of pixels.  The width of that strip, kernel minus stride, is
the knob the stem variants trade on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import ChannelLayerNorm, Conv2d, ConvTranspose2d
from .params import ParamStore
from .tensor import Tensor


class OverlapError(ValueError):
    """Kernel smaller than stride: the sliding window would skip pixels."""


def overlap_width(kernel: int, stride: int) -> int:
    """Pixels shared by adjacent windows of a single strided convolution."""
    if stride < 1 or kernel < 1:
        raise ValueError(f"kernel and stride must be >= 1, got ({kernel}, {stride})")
    if kernel < stride:
        raise OverlapError(
            f"kernel {kernel} < stride {stride}: windows would skip {stride - kernel} pixel(s)")
    return kernel - stride


def visit_counts(kernel: int, stride: int, h: int, w: int, padding: int | None = None) -> np.ndarray:
    """How many sliding windows touch each input pixel (brute force).

    Interior pixels of non-overlapping patches count 1; overlap strips count
    more, forming a grid of lines of width kernel - stride.
    """
    overlap_width(kernel, stride)
    p = kernel // 2 if padding is None else padding
    counts = np.zeros((h + 2 * p, w + 2 * p), dtype=np.int64)
    oh = (h + 2 * p - kernel) // stride + 1
    ow = (w + 2 * p - kernel) // stride + 1
    for i in range(oh):
        for j in range(ow):
            counts[i * stride:i * stride + kernel, j * stride:j * stride + kernel] += 1
    return counts[p:p + h, p:p + w] if p else counts


@dataclass(frozen=True)
class EmbedSpec:
    """One stem layer: kind 'conv' or 'deconv', plus kernel/stride/padding."""

    kind: str = "conv"
    kernel: int = 7
    stride: int = 4
    padding: int = -1  # -1: derived (k//2 for conv, (k-s)//2 for deconv)

    def __post_init__(self):
        if self.kind not in ("conv", "deconv"):
            raise ValueError(f"unknown stem layer kind: {self.kind!r}")
        if self.kind == "conv":
            overlap_width(self.kernel, self.stride)

    def pad(self) -> int:
        if self.padding >= 0:
            return self.padding
        if self.kind == "conv":
            return self.kernel // 2
        return (self.kernel - self.stride) // 2

    def scale(self) -> float:
        """Spatial size multiplier: 1/stride for conv, stride for deconv."""
        return (1.0 / self.stride) if self.kind == "conv" else float(self.stride)

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        p = self.pad()
        if self.kind == "conv":
            return ((h + 2 * p - self.kernel) // self.stride + 1,
                    (w + 2 * p - self.kernel) // self.stride + 1)
        return ((h - 1) * self.stride - 2 * p + self.kernel,
                (w - 1) * self.stride - 2 * p + self.kernel)


DEFAULT_STEM = (EmbedSpec("conv", 7, 4),)


def stem_widths(specs: tuple[EmbedSpec, ...], out_channels: int) -> list[tuple[int, int]]:
    """(cin, cout) per stem layer; multi-layer stems route through cout/2."""
    mid = max(out_channels // 2, 1)
    widths = []
    cin = 3
    for i, _ in enumerate(specs):
        cout = out_channels if i == len(specs) - 1 else mid
        widths.append((cin, cout))
        cin = cout
    return widths


def validate_stem(specs: tuple[EmbedSpec, ...]) -> None:
    scale = 1.0
    for s in specs:
        scale *= s.scale()
    if abs(scale - 0.25) > 1e-9:
        raise ValueError(
            f"stem must reduce spatial size by 4, got x{1 / scale:g} from {specs}")


class Stem:
    """Overlapping patch embedding: strided conv(s) + channel LayerNorm."""

    def __init__(self, store: ParamStore, name: str, specs: tuple[EmbedSpec, ...],
                 out_channels: int, seed: int, dtype=np.float32):
        validate_stem(specs)
        self.specs = specs
        self.layers = []
        for i, (spec, (cin, cout)) in enumerate(zip(specs, stem_widths(specs, out_channels))):
            lname = f"{name}.conv{i}"
            if spec.kind == "conv":
                layer = Conv2d(store, lname, cin, cout, spec.kernel, seed,
                               stride=spec.stride, padding=spec.pad(), dtype=dtype)
            else:
                layer = ConvTranspose2d(store, lname, cin, cout, spec.kernel, seed,
                                        stride=spec.stride, padding=spec.pad(), dtype=dtype)
            self.layers.append(layer)
        self.norm = ChannelLayerNorm(store, f"{name}.norm", out_channels, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h, w = x.shape[1], x.shape[2]
        if h % 4 or w % 4:
            raise T.ShapeError(f"stem input {h}x{w} not divisible by total stride 4")
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.gelu(x)
        return self.norm(x)


class Downsample:
    """Overlapping k=3 s=2 p=1 conv + norm: halves the map, swaps channels."""

    def __init__(self, store: ParamStore, name: str, cin: int, cout: int, seed: int, dtype=np.float32):
        self.conv = Conv2d(store, f"{name}.conv", cin, cout, 3, seed,
                           stride=2, padding=1, dtype=dtype)
        self.norm = ChannelLayerNorm(store, f"{name}.norm", cout, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h, w = x.shape[1], x.shape[2]
        if h % 2 or w % 2:
            raise T.ShapeError(f"downsample needs even spatial size, got {h}x{w}")
        return self.norm(self.conv(x))


def parse_stem(text: str) -> tuple[EmbedSpec, ...]:
    """Parse 'conv7s4' or 'conv3s2,conv3s2' or 'conv15s8,deconv4s2'."""
    specs = []
    for part in text.split(","):
        part = part.strip().lower()
        for kind in ("deconv", "conv"):
            if part.startswith(kind):
                body = part[len(kind):]
                break
        else:
            raise ValueError(f"stem layer must start with conv/deconv: {part!r}")
        if "s" not in body:
            raise ValueError(f"stem layer needs '<kernel>s<stride>': {part!r}")
        k, s = body.split("s", 1)
        specs.append(EmbedSpec(kind, int(k), int(s)))
    return tuple(specs)


def format_stem(specs: tuple[EmbedSpec, ...]) -> str:
    return ",".join(f"{s.kind}{s.kernel}s{s.stride}" for s in specs)
