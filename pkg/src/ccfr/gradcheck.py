"""Seeded finite-difference checks over random instances of every loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hierarchy import Hierarchy
from .losses import (
    TripletInputs,
    check_gradient,
    cross_entropy,
    hierarchy_hinge,
    multi_level_loss,
    softmax,
    triplet_loss,
    triplet_margin,
)

TOLERANCE = 1e-4
MIN_HINGE_MARGIN = 1e-3
# Central differences at eps=1e-5 cannot resolve gradient entries much below
# 1e-6 in relative terms, so instances keep every softmax probability above this.
MIN_PROB = 1e-4


@dataclass(frozen=True)
class SuiteRow:
    name: str
    instances: int
    hinge_active: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def random_hierarchy(rng: np.random.Generator, c: int, c_f: int) -> Hierarchy:
    parent = np.concatenate([np.arange(c_f), rng.integers(0, c_f, c - c_f)])
    rng.shuffle(parent)
    return Hierarchy(tuple(int(p) for p in parent), c_f)


def _cross_entropy_case(rng):
    while True:
        c = int(rng.integers(2, 13))
        logits = rng.normal(0.0, 2.0, c)
        if softmax(logits).min() > MIN_PROB:
            return logits, int(rng.integers(c))


def _multi_level_case(rng):
    """Random instance whose hinge is at least MIN_HINGE_MARGIN from its kink."""
    while True:
        c = int(rng.integers(4, 13))
        c_f = int(rng.integers(2, c // 2 + 1))
        h = random_hierarchy(rng, c, c_f)
        label = int(rng.integers(c))
        zc = rng.normal(0.0, rng.uniform(0.5, 2.0), c)
        zs = rng.normal(0.0, rng.uniform(0.5, 2.0), c_f)
        if rng.random() < 0.5:
            # Starve the parent so roughly half the cases exercise the hinge.
            zs[h.parent[label]] -= 2.5
            zc[list(h.children_of(h.parent[label]))] += 1.0
        pc, ps = softmax(zc), softmax(zs)
        if min(pc.min(), ps.min()) <= MIN_PROB:
            continue
        _, p_children, p_parent = hierarchy_hinge(pc, ps, h, label)
        if abs(p_children - p_parent) > MIN_HINGE_MARGIN:
            return zc, zs, h, label, p_children > p_parent


def _triplet_case(rng, margin: float = 0.2):
    while True:
        d = int(rng.integers(3, 17))
        vecs = rng.normal(size=(3, d)) * rng.uniform(0.5, 2.0, size=(3, 1))
        t = TripletInputs(vecs[0], vecs[1], vecs[2], margin)
        if np.any(np.linalg.norm(vecs, axis=1) == 0):
            continue
        y = triplet_margin(t)
        if abs(y) > MIN_HINGE_MARGIN:
            return t, y < 0


def run_suite(instances: int = 100, seed: int = 0, epsilon: float = 1e-5) -> list[SuiteRow]:
    rng = np.random.default_rng(seed)

    ce_err = 0.0
    for _ in range(instances):
        logits, label = _cross_entropy_case(rng)
        ce_err = max(ce_err, check_gradient(lambda z: cross_entropy(z, label), [logits], epsilon))

    ml_err, ml_active = 0.0, 0
    for _ in range(instances):
        zc, zs, h, label, active = _multi_level_case(rng)
        ml_active += active
        err = check_gradient(lambda a, b: multi_level_loss(a, b, h, label), [zc, zs], epsilon)
        ml_err = max(ml_err, err)

    tl_err, tl_active = 0.0, 0
    for _ in range(instances):
        t, active = _triplet_case(rng)
        tl_active += active
        err = check_gradient(
            lambda a, p, n: triplet_loss(TripletInputs(a, p, n, t.margin)),
            [t.anchor, t.positive, t.negative], epsilon,
        )
        tl_err = max(tl_err, err)

    return [
        SuiteRow("cross_entropy", instances, 0, ce_err),
        SuiteRow("multi_level_loss", instances, ml_active, ml_err),
        SuiteRow("triplet_loss", instances, tl_active, tl_err),
    ]


def format_table(rows: list[SuiteRow]) -> str:
    lines = [f"{'loss':<18} {'n':>5} {'hinge_on':>8} {'max_rel_err':>12}  status"]
    for r in rows:
        lines.append(f"{r.name:<18} {r.instances:>5} {r.hinge_active:>8} "
                     f"{r.max_rel_error:>12.3e}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
