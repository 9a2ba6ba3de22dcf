"""Anchor grids, IoU and NMS that runs independently per anchor scale."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Sequence

DEFAULT_IMAGE_SIZE = 448
DEFAULT_SCALES = (96, 192)
DEFAULT_STRIDES = (32, 64)
DEFAULT_NMS_THRESHOLD = 0.25
DEFAULT_KEEP_PER_SCALE = 2


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float
    scale_index: int = 0
    score: float = 0.0

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"box must have positive area, got {self.coords}")
        if self.scale_index < 0:
            raise ValueError(f"scale_index must be >= 0, got {self.scale_index}")

    @property
    def coords(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def with_score(self, score: float) -> "Box":
        return replace(self, score=float(score))


@dataclass(frozen=True)
class AnchorSpec:
    image_size: int = DEFAULT_IMAGE_SIZE
    scales: tuple[int, ...] = DEFAULT_SCALES
    strides: tuple[int, ...] = DEFAULT_STRIDES
    aspect_ratio: float = 1.0
    clip: bool = True

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(self.scales))
        object.__setattr__(self, "strides", tuple(self.strides))
        self.validate()

    def validate(self) -> None:
        if self.image_size <= 0:
            raise ValueError(f"image_size must be positive, got {self.image_size}")
        if not self.scales:
            raise ValueError("scales must not be empty")
        if len(self.strides) != len(self.scales):
            raise ValueError(
                f"strides must have one entry per scale "
                f"({len(self.strides)} strides for {len(self.scales)} scales)"
            )
        if any(s <= 0 for s in self.scales):
            raise ValueError(f"scales must be positive, got {self.scales}")
        if any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise ValueError(f"scales must be strictly increasing, got {self.scales}")
        for stride in self.strides:
            if stride <= 0:
                raise ValueError(f"strides must be positive, got {self.strides}")
            if stride > self.image_size:
                raise ValueError(
                    f"stride {stride} exceeds image_size {self.image_size}: no grid centers"
                )
        if self.aspect_ratio != 1.0:
            raise ValueError("only 1:1 anchors are supported")


def _grid_centers(image_size: int, stride: int) -> list[float]:
    centers = []
    i = 0
    while (i + 0.5) * stride < image_size:
        centers.append((i + 0.5) * stride)
        i += 1
    return centers


def generate_anchors(spec: AnchorSpec | None = None) -> list[Box]:
    """Square anchors of every scale on its stride grid.

    Boxes come out ordered by (scale_index, row, column) with score 0.
    """
    spec = spec or AnchorSpec()
    spec.validate()
    size = float(spec.image_size)
    boxes = []
    for scale_index, (side, stride) in enumerate(zip(spec.scales, spec.strides)):
        half = side / 2.0
        centers = _grid_centers(spec.image_size, stride)
        for cy in centers:
            for cx in centers:
                x1, y1, x2, y2 = cx - half, cy - half, cx + half, cy + half
                if spec.clip:
                    x1, y1 = max(0.0, x1), max(0.0, y1)
                    x2, y2 = min(size, x2), min(size, y2)
                boxes.append(Box(x1, y1, x2, y2, scale_index, 0.0))
    return boxes


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def greedy_nms(boxes: Sequence[Box], iou_threshold: float, keep: int | None = None) -> list[Box]:
    """Plain greedy NMS. Equal scores keep input order; IoU equal to the threshold survives."""
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))
    kept: list[Box] = []
    for i in order:
        if keep is not None and len(kept) >= keep:
            break
        candidate = boxes[i]
        if all(iou(candidate, k) <= iou_threshold for k in kept):
            kept.append(candidate)
    return kept


def scale_separated_nms(
    boxes: Iterable[Box],
    iou_threshold: float = DEFAULT_NMS_THRESHOLD,
    keep_per_scale: int = DEFAULT_KEEP_PER_SCALE,
) -> list[Box]:
    """Run greedy NMS inside each scale so boxes of different scales never compete.

    Survivors are returned ordered by scale_index, then by descending score,
    at most ``keep_per_scale`` per scale.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    if keep_per_scale < 1:
        raise ValueError(f"keep_per_scale must be >= 1, got {keep_per_scale}")
    by_scale: dict[int, list[Box]] = {}
    for box in boxes:
        by_scale.setdefault(box.scale_index, []).append(box)
    survivors = []
    for scale_index in sorted(by_scale):
        survivors.extend(greedy_nms(by_scale[scale_index], iou_threshold, keep_per_scale))
    return survivors
