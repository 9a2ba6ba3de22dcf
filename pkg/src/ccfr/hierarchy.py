"""Two-level category hierarchy built by clustering per-class mean embeddings."""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class Hierarchy:
    parent: tuple[int, ...]
    num_super: int

    def __post_init__(self):
        object.__setattr__(self, "parent", tuple(int(p) for p in self.parent))
        if not self.parent:
            raise ValueError("hierarchy needs at least one child class")
        if not 1 <= self.num_super <= len(self.parent):
            raise ValueError(
                f"num_super must be in [1, {len(self.parent)}], got {self.num_super}"
            )
        if any(not 0 <= p < self.num_super for p in self.parent):
            raise ValueError(f"parent indices must lie in [0, {self.num_super})")
        missing = set(range(self.num_super)) - set(self.parent)
        if missing:
            raise ValueError(f"super classes without children: {sorted(missing)}")

    @property
    def num_children(self) -> int:
        return len(self.parent)

    @cached_property
    def _members(self) -> tuple[tuple[int, ...], ...]:
        groups: list[list[int]] = [[] for _ in range(self.num_super)]
        for child, p in enumerate(self.parent):
            groups[p].append(child)
        return tuple(tuple(g) for g in groups)

    def children_of(self, super_index: int) -> tuple[int, ...]:
        return self._members[super_index]

    def to_dict(self) -> dict:
        return {"num_children": self.num_children, "num_super": self.num_super,
                "parent": list(self.parent)}

    @classmethod
    def from_dict(cls, d: dict) -> "Hierarchy":
        h = cls(tuple(d["parent"]), int(d["num_super"]))
        if "num_children" in d and int(d["num_children"]) != h.num_children:
            raise ValueError(
                f"num_children {d['num_children']} disagrees with parent length {h.num_children}"
            )
        return h

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "Hierarchy":
        return cls.from_dict(json.loads(text))


def super_label(h: Hierarchy, child: int) -> int:
    if not 0 <= child < h.num_children:
        raise ValueError(f"child {child} out of range for {h.num_children} classes")
    return h.parent[child]


def class_means(records: Sequence, num_classes: int) -> np.ndarray:
    """L2-normalised mean embedding of each class, shape (num_classes, E)."""
    if not records:
        raise ValueError("no records")
    dim = len(records[0].embedding)
    sums = np.zeros((num_classes, dim))
    counts = np.zeros(num_classes, dtype=np.int64)
    for r in records:
        v = np.asarray(r.embedding, dtype=np.float64)
        if v.shape != (dim,):
            raise ValueError(f"record {r.id!r} has dimension {v.size}, expected {dim}")
        if not 0 <= r.label < num_classes:
            raise ValueError(f"record {r.id!r} has label {r.label} outside [0, {num_classes})")
        sums[r.label] += v
        counts[r.label] += 1
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise ValueError(f"classes without records: {empty.tolist()}")
    means = sums / counts[:, None]
    norms = np.linalg.norm(means, axis=1)
    if np.any(norms == 0):
        raise ValueError(f"zero mean vector for classes {np.flatnonzero(norms == 0).tolist()}")
    return means / norms[:, None]


def cosine_distance_matrix(means: np.ndarray) -> np.ndarray:
    """1 - cosine similarity, with exact duplicates pinned to distance 0."""
    m = np.asarray(means, dtype=np.float64)
    unit = m / np.linalg.norm(m, axis=1, keepdims=True)
    dist = np.clip(1.0 - unit @ unit.T, 0.0, 2.0)
    dist = (dist + dist.T) / 2.0
    _, inverse = np.unique(m, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    dist[inverse[:, None] == inverse[None, :]] = 0.0
    return dist


def build_hierarchy(means, num_super: int) -> Hierarchy:
    """Average-linkage agglomeration under cosine distance down to ``num_super`` clusters.

    Ties on linkage distance go to the pair whose (smallest member, smallest
    member) is lexicographically smallest. Clusters are labelled by their
    smallest member class, in increasing order.
    """
    means = np.asarray(means, dtype=np.float64)
    if means.ndim != 2:
        raise ValueError("means must be a (C, E) matrix")
    c = means.shape[0]
    if not 1 <= num_super <= c:
        raise ValueError(f"num_super must be in [1, {c}], got {num_super}")

    dist = cosine_distance_matrix(means)
    # Clusters are keyed by their smallest member; active rows of ``dist`` hold
    # cluster-to-cluster average linkage.
    members = {i: [i] for i in range(c)}
    active = np.ones(c, dtype=bool)
    np.fill_diagonal(dist, np.inf)
    for _ in range(c - num_super):
        masked = np.where(active[:, None] & active[None, :], dist, np.inf)
        # argmin over the row-major flattened upper triangle picks the
        # lexicographically smallest (i, j) among ties.
        masked[np.tril_indices(c)] = np.inf
        i, j = divmod(int(np.argmin(masked)), c)
        ni, nj = len(members[i]), len(members[j])
        merged = (ni * dist[i] + nj * dist[j]) / (ni + nj)
        dist[i, :] = merged
        dist[:, i] = merged
        dist[i, i] = np.inf
        active[j] = False
        dist[j, :] = np.inf
        dist[:, j] = np.inf
        members[i].extend(members.pop(j))

    parent = [0] * c
    for label, root in enumerate(sorted(members)):
        for child in members[root]:
            parent[child] = label
    return Hierarchy(tuple(parent), num_super)


def default_num_super(num_classes: int) -> int:
    return max(1, round(num_classes / 4))
