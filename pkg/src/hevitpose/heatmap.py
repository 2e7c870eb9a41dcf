"""Gaussian heatmap supervision, decoding, flip-test averaging, and scoring.

Coordinates are (x, y) in heatmap-pixel units, x along the width axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class KeypointSet:
    """Per-joint (x, y) coordinates, visibility flags, and peak scores."""

    xy: np.ndarray                       # (K, 2) float
    visible: np.ndarray                  # (K,) bool
    head_length: float | None = None     # pixels, for threshold normalization
    scores: np.ndarray | None = None     # (K,) peak values from decoding

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        self.visible = np.asarray(self.visible, dtype=bool).reshape(-1)
        if self.xy.shape[0] != self.visible.shape[0]:
            raise ValueError("xy and visibility lengths differ")

    @property
    def count(self) -> int:
        return self.xy.shape[0]


@dataclass(frozen=True)
class FlipPairs:
    """(left, right) joint index pairs to swap under horizontal mirroring."""

    pairs: tuple[tuple[int, int], ...]

    def validate(self, keypoints: int) -> None:
        for a, b in self.pairs:
            if a == b or not (0 <= a < keypoints and 0 <= b < keypoints):
                raise ValueError(f"invalid flip pair ({a}, {b}) for {keypoints} joints")

    def channel_order(self, keypoints: int) -> np.ndarray:
        self.validate(keypoints)
        order = np.arange(keypoints)
        for a, b in self.pairs:
            order[a], order[b] = order[b], order[a]
        return order


def gaussian_target(kps: KeypointSet, shape: tuple[int, int, int], sigma: float = 1.0,
                    truncate: float | None = None, dtype=np.float64) -> Tensor:
    """Per-joint 2-D Gaussian with peak 1 at the keypoint.

    Rendered over the full map by default; `truncate` limits rendering to a
    radius of that many sigmas for speed parity with common codebases.
    Invisible joints produce all-zero channels.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    k, h, w = shape
    if k != kps.count:
        raise ValueError(f"target wants {k} channels but keypoint set has {kps.count}")
    ys = np.arange(h, dtype=np.float64)
    xs = np.arange(w, dtype=np.float64)
    out = np.zeros((k, h, w), dtype=np.float64)
    for j in range(k):
        if not kps.visible[j]:
            continue
        x0, y0 = kps.xy[j]
        g = np.exp(-((xs[None, :] - x0) ** 2 + (ys[:, None] - y0) ** 2) / (2 * sigma * sigma))
        if truncate is not None:
            g[((xs[None, :] - x0) ** 2 + (ys[:, None] - y0) ** 2) > (truncate * sigma) ** 2] = 0.0
        out[j] = g
    return Tensor(out.astype(dtype))


def mse_loss(pred: Tensor, target: Tensor, visible: np.ndarray | None = None) -> Tensor:
    """Mean squared error over visible channels."""
    if pred.shape != target.shape:
        raise T.ShapeError(f"loss shapes differ: {pred.shape} vs {target.shape}")
    diff = T.add(pred, T.scale(target, -1.0))
    sq = T.mul(diff, diff)
    if visible is None:
        return sq.mean()
    vis = np.asarray(visible, dtype=bool)
    if not vis.any():
        raise ValueError("no visible joints to score")
    mask = np.zeros(pred.shape, dtype=pred.data.dtype)
    mask[vis] = 1.0
    per_px = 1.0 / (vis.sum() * pred.shape[1] * pred.shape[2])
    return T.scale(T.mul(sq, Tensor(mask)).sum(), per_px)


def decode(hm: Tensor | np.ndarray) -> KeypointSet:
    """Argmax location plus a quarter-pixel shift toward the larger neighbor.

    Ties resolve to the smallest row-major index; a zero neighbor difference
    gives no shift; peaks on a border skip the shift along that axis.
    """
    maps = hm.data if isinstance(hm, Tensor) else np.asarray(hm)
    k, h, w = maps.shape
    xy = np.zeros((k, 2), dtype=np.float64)
    scores = np.zeros(k, dtype=np.float64)
    for j in range(k):
        m = maps[j]
        idx = int(np.argmax(m))
        y, x = divmod(idx, w)
        scores[j] = m[y, x]
        fx, fy = float(x), float(y)
        if 0 < x < w - 1:
            fx += 0.25 * np.sign(m[y, x + 1] - m[y, x - 1])
        if 0 < y < h - 1:
            fy += 0.25 * np.sign(m[y + 1, x] - m[y - 1, x])
        xy[j] = (fx, fy)
    return KeypointSet(xy, np.ones(k, dtype=bool), scores=scores)


def flip_horizontal(x: Tensor) -> Tensor:
    """Mirror a (C,H,W) tensor along the width axis (no gradient tracking)."""
    return Tensor(np.ascontiguousarray(x.data[:, :, ::-1]))


def unflip(hm: Tensor, pairs: FlipPairs) -> Tensor:
    """Mirror heatmaps back and swap paired joint channels."""
    order = pairs.channel_order(hm.shape[0])
    return Tensor(np.ascontiguousarray(hm.data[order][:, :, ::-1]))


def flip_average(model, x: Tensor, pairs: FlipPairs) -> Tensor:
    """Average the model's heatmap with the unflipped heatmap of the mirror."""
    direct = model(x)
    mirrored = unflip(model(flip_horizontal(x)), pairs)
    return Tensor(0.5 * (direct.data + mirrored.data))


def pckh(preds: list[KeypointSet], gts: list[KeypointSet], alpha: float = 0.5
         ) -> tuple[np.ndarray, float]:
    """Percentage of visible joints within alpha * head length of truth.

    Returns (per-joint scores, total score), each in [0, 100].
    """
    if len(preds) != len(gts):
        raise ValueError("prediction and ground-truth counts differ")
    if not gts:
        raise ValueError("empty evaluation set")
    k = gts[0].count
    hits = np.zeros(k, dtype=np.int64)
    seen = np.zeros(k, dtype=np.int64)
    for p, g in zip(preds, gts):
        if g.head_length is None:
            raise ValueError("ground truth lacks the head-segment length")
        thr = alpha * g.head_length
        dist = np.linalg.norm(p.xy - g.xy, axis=1)
        ok = (dist <= thr) & g.visible
        hits += ok.astype(np.int64)
        seen += g.visible.astype(np.int64)
    per_joint = np.where(seen > 0, 100.0 * hits / np.maximum(seen, 1), np.nan)
    total = 100.0 * hits.sum() / max(seen.sum(), 1)
    return per_joint, float(total)


def predictions_csv(preds: list[KeypointSet], path: str) -> None:
    """Export decoded keypoints: image_id, joint_id, x, y, score."""
    with open(path, "w") as fh:
        fh.write("image_id,joint_id,x,y,score\n")
        for i, p in enumerate(preds):
            scores = p.scores if p.scores is not None else np.zeros(p.count)
            for j in range(p.count):
                fh.write(f"{i},{j},{p.xy[j, 0]:.4f},{p.xy[j, 1]:.4f},{scores[j]:.6f}\n")
