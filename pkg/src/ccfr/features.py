"""Fuse per-scale local region features and join them with the global feature."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class ScaleWeights:
    """Linear fusion for one scale: ``concat(locals) @ matrix + bias``.

    ``matrix`` has shape (K*D, D); applied to a pooled vector this is exactly a
    1x1 convolution over the channel-concatenated region features.
    """

    matrix: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if m.ndim != 2 or b.ndim != 1 or m.shape[1] != b.shape[0]:
            raise ValueError(f"matrix {m.shape} and bias {b.shape} are inconsistent")
        if m.shape[0] % m.shape[1]:
            raise ValueError(f"matrix rows {m.shape[0]} are not a multiple of output dim {m.shape[1]}")
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(b))):
            raise ValueError("fusion weights must be finite")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "bias", b)

    @property
    def dim(self) -> int:
        return self.bias.shape[0]

    @property
    def num_regions(self) -> int:
        return self.matrix.shape[0] // self.dim


@dataclass(frozen=True)
class FusionWeights:
    scales: tuple[ScaleWeights, ...]

    def to_dict(self) -> dict:
        return {"scales": [{"matrix": w.matrix.tolist(), "bias": w.bias.tolist()}
                           for w in self.scales]}

    @classmethod
    def from_dict(cls, d: dict) -> "FusionWeights":
        return cls(tuple(ScaleWeights(s["matrix"], s["bias"]) for s in d["scales"]))

    @classmethod
    def identity(cls, dim: int, num_regions: int, num_scales: int) -> "FusionWeights":
        """Each scale outputs the sum of its region features."""
        m = np.tile(np.eye(dim), (num_regions, 1))
        return cls(tuple(ScaleWeights(m, np.zeros(dim)) for _ in range(num_scales)))

    @classmethod
    def random(cls, dim: int, num_regions: int, num_scales: int, seed: int = 0) -> "FusionWeights":
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(num_regions * dim)
        return cls(tuple(
            ScaleWeights(rng.normal(0.0, scale, (num_regions * dim, dim)), rng.normal(0.0, 0.01, dim))
            for _ in range(num_scales)
        ))


@dataclass(frozen=True)
class FeatureBundle:
    global_feature: np.ndarray
    local_features: tuple[tuple[np.ndarray, ...], ...]


def pad_missing_regions(locals_: Sequence, k: int, dim: int) -> list[np.ndarray]:
    """Zero-pad a scale's region list up to ``k`` entries."""
    if len(locals_) > k:
        raise ValueError(f"{len(locals_)} region features exceed keep_per_scale={k}")
    out = [np.asarray(v, dtype=np.float64) for v in locals_]
    out.extend(np.zeros(dim) for _ in range(k - len(out)))
    return out


def fuse_scale(locals_: Sequence, w: ScaleWeights) -> np.ndarray:
    vecs = [np.asarray(v, dtype=np.float64) for v in locals_]
    if len(vecs) != w.num_regions or any(v.shape != (w.dim,) for v in vecs):
        raise ValueError(
            f"expected {w.num_regions} region vectors of dim {w.dim}, "
            f"got {[v.shape for v in vecs]}"
        )
    return np.concatenate(vecs) @ w.matrix + w.bias


def assemble_embedding(bundle: FeatureBundle, weights: FusionWeights,
                       normalize: bool = True) -> np.ndarray:
    """concat(global, fused scale 0, ..., fused scale S-1), optionally L2-normalised."""
    g = np.asarray(bundle.global_feature, dtype=np.float64)
    if len(bundle.local_features) != len(weights.scales):
        raise ValueError(
            f"bundle has {len(bundle.local_features)} scales, weights have {len(weights.scales)}"
        )
    parts = [g]
    for locals_, w in zip(bundle.local_features, weights.scales):
        if w.dim != g.shape[0]:
            raise ValueError(f"fusion output dim {w.dim} != global feature dim {g.shape[0]}")
        parts.append(fuse_scale(pad_missing_regions(locals_, w.num_regions, w.dim), w))
    out = np.concatenate(parts)
    if normalize:
        norm = np.linalg.norm(out)
        if norm == 0:
            raise ValueError("cannot normalise a zero embedding")
        out = out / norm
    return out
