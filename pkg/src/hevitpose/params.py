"""Named parameter registry and deterministic initialization.

Every parameter draws from its own random stream derived from
(config seed, parameter name), so adding or removing layers never shifts
the values of existing ones.
"""

from __future__ import annotations

import hashlib
from typing import Iterator

import numpy as np

from .tensor import Tensor


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named component under one root seed."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return np.random.Generator(np.random.PCG64(int.from_bytes(digest[:16], "little")))


def truncated_normal(gen: np.random.Generator, shape, std: float = 0.02,
                     trunc: float = 2.0, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) with redraws outside +/- trunc standard deviations."""
    out = gen.standard_normal(shape)
    bad = np.abs(out) > trunc
    while bad.any():
        out[bad] = gen.standard_normal(int(bad.sum()))
        bad = np.abs(out) > trunc
    return (out * std).astype(dtype)


def fan_in_normal(gen: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    """Normal with std 1/sqrt(fan_in); the convolution default."""
    return (gen.standard_normal(shape) / np.sqrt(fan_in)).astype(dtype)


class ParamStore:
    """Map from hierarchical dotted name to trainable Tensor.

    Names are unique and enumeration is lexicographic, so checkpoints,
    counts, and optimizer state all see one stable order.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def register(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name in self.names():
            yield name, self._params[name]

    def tensors(self) -> list[Tensor]:
        return [self._params[n] for n in self.names()]

    def scalar_count(self) -> int:
        return sum(t.size for _, t in self.items())

    def zero_grads(self) -> None:
        for _, t in self.items():
            t.zero_grad()
