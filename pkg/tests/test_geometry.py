import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccfr.geometry import (
    DEFAULT_KEEP_PER_SCALE,
    DEFAULT_NMS_THRESHOLD,
    AnchorSpec,
    Box,
    generate_anchors,
    iou,
    scale_separated_nms,
)


def brute_force_nms(boxes, threshold, keep):
    """Independent greedy NMS: repeatedly take the best remaining box and drop
    everything overlapping it, one scale at a time."""
    out = []
    for s in sorted({b.scale_index for b in boxes}):
        remaining = [(i, b) for i, b in enumerate(boxes) if b.scale_index == s]
        kept = []
        while remaining and len(kept) < keep:
            best = max(remaining, key=lambda ib: (ib[1].score, -ib[0]))
            kept.append(best[1])
            remaining = [ib for ib in remaining
                         if ib[0] != best[0] and _overlap(ib[1], best[1]) <= threshold]
        out.extend(kept)
    return out


def _overlap(a, b):
    w = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    h = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = w * h
    union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter
    return inter / union


def random_boxes(rng, n, scales=2, size=100.0):
    boxes = []
    for _ in range(n):
        x1, y1 = rng.uniform(0, size * 0.7, 2)
        w, h = rng.uniform(5, size * 0.5, 2)
        boxes.append(Box(x1, y1, x1 + w, y1 + h, int(rng.integers(scales)),
                         float(np.round(rng.uniform(), 2))))
    return boxes


class TestAnchors:
    def test_default_grid_counts(self):
        anchors = generate_anchors(AnchorSpec(448, (96, 192), (32, 64), clip=True))
        # Independent count: grid centres (i + 0.5) * t strictly inside 448.
        expected = [sum(1 for i in range(100) if (i + 0.5) * t < 448) ** 2 for t in (32, 64)]
        assert expected == [196, 49]
        assert len(anchors) == 245
        assert sum(a.scale_index == 0 for a in anchors) == 196
        assert sum(a.scale_index == 1 for a in anchors) == 49

    def test_single_cell(self):
        (a,) = generate_anchors(AnchorSpec(96, (96,), (96,)))
        assert a.coords == (0.0, 0.0, 96.0, 96.0)

    def test_square_before_clipping(self):
        for a in generate_anchors(AnchorSpec(clip=False)):
            assert a.x2 - a.x1 == a.y2 - a.y1 == (96, 192)[a.scale_index]

    def test_clipped_inside_image(self):
        for a in generate_anchors(AnchorSpec()):
            assert 0 <= a.x1 < a.x2 <= 448 and 0 <= a.y1 < a.y2 <= 448
            assert a.score == 0.0

    def test_order_scale_row_column(self):
        anchors = generate_anchors(AnchorSpec(clip=False))
        keys = [(a.scale_index, (a.y1 + a.y2) / 2, (a.x1 + a.x2) / 2) for a in anchors]
        assert keys == sorted(keys)

    def test_deterministic(self):
        assert generate_anchors(AnchorSpec()) == generate_anchors(AnchorSpec())

    @pytest.mark.parametrize("kwargs", [
        dict(image_size=64, scales=(96,), strides=(128,)),
        dict(scales=(192, 96)),
        dict(scales=(96, 192), strides=(32,)),
    ])
    def test_rejects_bad_spec(self, kwargs):
        with pytest.raises(ValueError):
            AnchorSpec(**kwargs)


class TestIoU:
    def test_identity(self):
        b = Box(0, 0, 10, 10)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(Box(0, 0, 10, 10), Box(20, 20, 30, 30)) == 0.0

    def test_half_overlap(self):
        assert iou(Box(0, 0, 100, 100), Box(0, 50, 100, 150)) == pytest.approx(1 / 3)

    @given(st.lists(st.floats(0, 100), min_size=8, max_size=8))
    def test_symmetric_and_bounded(self, v):
        a = Box(v[0], v[1], v[0] + 1 + v[2], v[1] + 1 + v[3])
        b = Box(v[4], v[5], v[4] + 1 + v[6], v[5] + 1 + v[7])
        assert iou(a, b) == iou(b, a)
        assert 0.0 <= iou(a, b) <= 1.0


class TestScaleSeparatedNMS:
    def test_defaults(self):
        assert DEFAULT_NMS_THRESHOLD == 0.25
        assert DEFAULT_KEEP_PER_SCALE == 2

    def test_same_scale_example(self):
        b1 = Box(0, 0, 100, 100, 0, 0.9)
        b2 = Box(0, 0, 100, 50, 0, 0.8)
        b3 = Box(200, 200, 300, 300, 0, 0.7)
        assert iou(b1, b2) == 0.5 and iou(b1, b3) == iou(b2, b3) == 0.0
        assert scale_separated_nms([b2, b3, b1], 0.25, 2) == [b1, b3]
        assert brute_force_nms([b2, b3, b1], 0.25, 2) == [b1, b3]

    def test_scales_never_cross_suppress(self):
        a = Box(0, 0, 100, 100, 0, 0.9)
        b = Box(0, 0, 100, 50, 1, 0.8)
        assert scale_separated_nms([a, b], 0.25, 2) == [a, b]

    def test_threshold_is_strict(self):
        a = Box(0, 0, 100, 100, 0, 0.9)
        b = Box(0, 0, 100, 50, 0, 0.8)
        assert scale_separated_nms([a, b], 0.5, 2) == [a, b]

    def test_empty(self):
        assert scale_separated_nms([]) == []

    def test_tie_keeps_input_order(self):
        a = Box(0, 0, 10, 10, 0, 0.5)
        b = Box(0, 0, 10, 10, 0, 0.5)
        c = Box(50, 50, 60, 60, 0, 0.5)
        out = scale_separated_nms([a, b, c], 0.25, 3)
        assert out[0] is a and out[1] is c

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        boxes = random_boxes(rng, int(rng.integers(0, 11)))
        assert scale_separated_nms(boxes, 0.25, 2) == brute_force_nms(boxes, 0.25, 2)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.05, 1.0))
    def test_survivor_properties(self, seed, threshold):
        rng = np.random.default_rng(seed)
        boxes = random_boxes(rng, int(rng.integers(1, 11)))
        out = scale_separated_nms(boxes, threshold, 3)
        for s in {b.scale_index for b in out}:
            same = [b for b in out if b.scale_index == s]
            assert len(same) <= 3
            assert [b.score for b in same] == sorted((b.score for b in same), reverse=True)
            for a, b in itertools.combinations(same, 2):
                assert iou(a, b) <= threshold
        assert [b.scale_index for b in out] == sorted(b.scale_index for b in out)

    def test_union_of_per_scale_greedy(self):
        rng = np.random.default_rng(7)
        boxes = random_boxes(rng, 10)
        out = scale_separated_nms(boxes, 0.25, 10)
        per_scale = []
        for s in (0, 1):
            per_scale += scale_separated_nms([b for b in boxes if b.scale_index == s], 0.25, 10)
        assert out == per_scale

    @pytest.mark.parametrize("threshold,keep", [(0.0, 2), (1.5, 2), (0.25, 0)])
    def test_rejects_bad_args(self, threshold, keep):
        with pytest.raises(ValueError):
            scale_separated_nms([Box(0, 0, 1, 1)], threshold, keep)


def test_box_rejects_zero_area():
    with pytest.raises(ValueError):
        Box(0, 0, 0, 10)
