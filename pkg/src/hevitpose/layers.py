"""Parameterized layers over the autodiff tensor ops.

Each layer registers its tensors in a ParamStore under a dotted prefix and
exposes a pure ``__call__``.  Initialization: truncated normal (std 0.02,
clipped at 2 std) for linear projections, fan-in-scaled normal for
convolutions, gamma=1/beta=0 for norms, zeros for biases.  Layers marked
``zero_init`` start their weights at zero so residual branches open as
identities.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .params import ParamStore, fan_in_normal, stream, truncated_normal
from .tensor import Tensor


class Linear:
    def __init__(self, store: ParamStore, name: str, din: int, dout: int,
                 seed: int, bias: bool = True, zero_init: bool = False, dtype=np.float32):
        self.din, self.dout = din, dout
        if zero_init:
            w = np.zeros((din, dout), dtype=dtype)
        else:
            w = truncated_normal(stream(seed, f"{name}.weight"), (din, dout), dtype=dtype)
        self.weight = store.register(f"{name}.weight", w)
        self.bias = store.register(f"{name}.bias", np.zeros(dout, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return T.add(y, self.bias) if self.bias is not None else y

    def param_count(self) -> int:
        return self.din * self.dout + (self.dout if self.bias is not None else 0)


class Conv2d:
    def __init__(self, store: ParamStore, name: str, cin: int, cout: int, kernel: int,
                 seed: int, stride: int = 1, padding: int = 0, groups: int = 1,
                 bias: bool = True, zero_init: bool = False, dtype=np.float32):
        if cin % groups or cout % groups:
            raise ValueError(f"{name}: channels {cin}->{cout} not divisible by groups={groups}")
        self.cin, self.cout, self.kernel = cin, cout, kernel
        self.stride, self.padding, self.groups = stride, padding, groups
        shape = (cout, cin // groups, kernel, kernel)
        if zero_init:
            w = np.zeros(shape, dtype=dtype)
        else:
            fan_in = (cin // groups) * kernel * kernel
            w = fan_in_normal(stream(seed, f"{name}.weight"), shape, fan_in, dtype=dtype)
        self.weight = store.register(f"{name}.weight", w)
        self.bias = store.register(f"{name}.bias", np.zeros(cout, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias,
                        stride=self.stride, padding=self.padding, groups=self.groups)

    def param_count(self) -> int:
        k = self.kernel
        return self.cout * (self.cin // self.groups) * k * k + (self.cout if self.bias is not None else 0)


class ConvTranspose2d:
    def __init__(self, store: ParamStore, name: str, cin: int, cout: int, kernel: int,
                 seed: int, stride: int = 1, padding: int = 0, bias: bool = True, dtype=np.float32):
        self.cin, self.cout, self.kernel = cin, cout, kernel
        self.stride, self.padding = stride, padding
        fan_in = cin * kernel * kernel
        w = fan_in_normal(stream(seed, f"{name}.weight"), (cin, cout, kernel, kernel), fan_in, dtype=dtype)
        self.weight = store.register(f"{name}.weight", w)
        self.bias = store.register(f"{name}.bias", np.zeros(cout, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d_transposed(x, self.weight, self.bias,
                                   stride=self.stride, padding=self.padding)

    def param_count(self) -> int:
        k = self.kernel
        return self.cin * self.cout * k * k + (self.cout if self.bias is not None else 0)


class LayerNorm:
    """Normalization over the last axis of token tensors (..., D)."""

    def __init__(self, store: ParamStore, name: str, dim: int, eps: float = 1e-6, dtype=np.float32):
        self.dim = dim
        self.eps = eps
        self.gamma = store.register(f"{name}.gamma", np.ones(dim, dtype=dtype))
        self.beta = store.register(f"{name}.beta", np.zeros(dim, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, eps=self.eps)

    def param_count(self) -> int:
        return 2 * self.dim


class ChannelLayerNorm:
    """LayerNorm over channels of a (C,H,W) map, per spatial position."""

    def __init__(self, store: ParamStore, name: str, channels: int, eps: float = 1e-6, dtype=np.float32):
        self.norm = LayerNorm(store, name, channels, eps=eps, dtype=dtype)
        self.channels = channels

    def __call__(self, x: Tensor) -> Tensor:
        c, h, w = x.shape
        tokens = T.reshape(x, (c, h * w)).permute(1, 0)
        y = self.norm(tokens)
        return T.reshape(y.permute(1, 0), (c, h, w))

    def param_count(self) -> int:
        return self.norm.param_count()


def map_to_tokens(x: Tensor) -> Tensor:
    """(C,H,W) -> (H*W, C)."""
    c, h, w = x.shape
    return T.reshape(x, (c, h * w)).permute(1, 0)


def tokens_to_map(x: Tensor, h: int, w: int) -> Tensor:
    """(H*W, C) -> (C,H,W)."""
    n, c = x.shape
    return T.reshape(x.permute(1, 0), (c, h, w))


class ResidualDWConv:
    """x + DWConv3x3(x): zero-padded depthwise positional coding.

    Zero-initialized so a fresh block leaves the map untouched.
    """

    def __init__(self, store: ParamStore, name: str, channels: int, seed: int, dtype=np.float32):
        self.conv = Conv2d(store, f"{name}.conv", channels, channels, 3, seed,
                           stride=1, padding=1, groups=channels, zero_init=True, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(x, self.conv(x))

    def param_count(self) -> int:
        return self.conv.param_count()


class FeedForward:
    """LN -> linear -> activation -> linear on tokens, second linear zero-init."""

    def __init__(self, store: ParamStore, name: str, dim: int, hidden: int, seed: int,
                 activation: str = "gelu", dtype=np.float32):
        self.norm = LayerNorm(store, f"{name}.norm", dim, dtype=dtype)
        self.fc1 = Linear(store, f"{name}.fc1", dim, hidden, seed, dtype=dtype)
        self.fc2 = Linear(store, f"{name}.fc2", hidden, dim, seed, zero_init=True, dtype=dtype)
        self.act = T.gelu if activation == "gelu" else T.relu
        self.dim, self.hidden = dim, hidden

    def __call__(self, tokens: Tensor) -> Tensor:
        return self.fc2(self.act(self.fc1(self.norm(tokens))))

    def param_count(self) -> int:
        return self.norm.param_count() + self.fc1.param_count() + self.fc2.param_count()
