"""Forward values and analytic gradients for the classification and metric losses.

All gradients stop at logits and embedding vectors; there is no network here.
Hinge subgradients are taken as 0 at the kink.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .hierarchy import Hierarchy

DEFAULT_LAMBDA = 1.0
DEFAULT_MU = 1.0
DEFAULT_MARGIN = 0.2


@dataclass(frozen=True)
class LossResult:
    value: float
    gradients: tuple[np.ndarray, ...]


@dataclass(frozen=True)
class TripletInputs:
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    margin: float = DEFAULT_MARGIN

    def __post_init__(self):
        for name in ("anchor", "positive", "negative"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if not (self.anchor.shape == self.positive.shape == self.negative.shape):
            raise ValueError("anchor, positive and negative must share one shape")
        if self.anchor.ndim != 1:
            raise ValueError("triplet embeddings must be 1-D vectors")
        if self.margin < 0:
            raise ValueError(f"margin must be >= 0, got {self.margin}")


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    e = np.exp(z - z.max())
    return e / e.sum()


def _check_label(label: int, n: int) -> None:
    if not 0 <= label < n:
        raise ValueError(f"label {label} out of range for {n} classes")


def cross_entropy(logits, label: int) -> LossResult:
    z = np.asarray(logits, dtype=np.float64)
    _check_label(label, z.size)
    shifted = z - z.max()
    log_norm = np.log(np.exp(shifted).sum())
    value = float(log_norm - shifted[label])
    grad = softmax(z)
    grad[label] -= 1.0
    return LossResult(value, (grad,))


def hierarchy_hinge(children_probs: np.ndarray, super_probs: np.ndarray,
                    hierarchy: Hierarchy, label: int) -> tuple[float, float, float]:
    """Returns (hinge, mean sibling probability, parent probability) for ``label``."""
    parent = hierarchy.parent[label]
    siblings = hierarchy.children_of(parent)
    p_children = float(children_probs[list(siblings)].mean())
    p_parent = float(super_probs[parent])
    return max(0.0, p_children - p_parent), p_children, p_parent


def multi_level_loss(children_logits, super_logits, hierarchy: Hierarchy, label: int,
                     lam: float = DEFAULT_LAMBDA) -> LossResult:
    """Children CE + lam * super CE + hinge tying sibling mass to the parent.

    The hinge compares the mean softmax probability of every child sharing the
    label's parent against that parent's super-class probability.
    """
    zc = np.asarray(children_logits, dtype=np.float64)
    zs = np.asarray(super_logits, dtype=np.float64)
    if zc.size != hierarchy.num_children or zs.size != hierarchy.num_super:
        raise ValueError(
            f"logit sizes ({zc.size}, {zs.size}) do not match hierarchy "
            f"({hierarchy.num_children}, {hierarchy.num_super})"
        )
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    _check_label(label, zc.size)
    parent = hierarchy.parent[label]

    l1 = cross_entropy(zc, label)
    l2 = cross_entropy(zs, parent)
    pc, ps = softmax(zc), softmax(zs)
    hinge, _, _ = hierarchy_hinge(pc, ps, hierarchy, label)

    grad_c = l1.gradients[0].copy()
    grad_s = lam * l2.gradients[0]
    if hinge > 0.0:
        members = np.zeros(zc.size, dtype=bool)
        members[list(hierarchy.children_of(parent))] = True
        n = members.sum()
        # d mean(p_S) / dz = (p * 1_S - p * sum(p_S)) / |S|
        grad_c += (pc * members - pc * pc[members].sum()) / n
        # d (-q_J) / dz = -q_J (e_J - q)
        onehot = np.zeros(zs.size)
        onehot[parent] = 1.0
        grad_s = grad_s - ps[parent] * (onehot - ps)

    value = l1.value + lam * l2.value + hinge
    return LossResult(value, (grad_c, grad_s))


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.dot(a, b) / (na * nb))


def _cosine_grads(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    cos = float(np.dot(a, b) / (na * nb))
    da = b / (na * nb) - cos * a / na**2
    db = a / (na * nb) - cos * b / nb**2
    return cos, da, db


def triplet_margin(t: TripletInputs) -> float:
    """sim(A, P) - sim(A, N) - margin; the loss is active when this is negative."""
    return cosine_similarity(t.anchor, t.positive) - cosine_similarity(t.anchor, t.negative) - t.margin


def triplet_loss(t: TripletInputs) -> LossResult:
    sim_ap, dap_a, dap_p = _cosine_grads(t.anchor, t.positive)
    sim_an, dan_a, dan_n = _cosine_grads(t.anchor, t.negative)
    y = sim_ap - sim_an - t.margin
    if y >= 0.0:
        zero = np.zeros_like(t.anchor)
        return LossResult(0.0, (zero, zero.copy(), zero.copy()))
    return LossResult(-y, (dan_a - dap_a, -dap_p, dan_n))


def total_loss(logits, label: int, t: TripletInputs, mu: float = DEFAULT_MU) -> LossResult:
    """Cross-entropy plus mu-weighted triplet loss.

    Gradients are ordered (logits, anchor, positive, negative).
    """
    ce = cross_entropy(logits, label)
    tl = triplet_loss(t)
    grads = (ce.gradients[0],) + tuple(mu * g for g in tl.gradients)
    return LossResult(ce.value + mu * tl.value, grads)


def mine_triplets(batch: Sequence, margin: float = DEFAULT_MARGIN, seed: int = 0) -> list[TripletInputs]:
    """Random positive plus batch-hardest negative for every anchor that has a positive.

    ``batch`` holds records with ``label`` and ``embedding`` attributes. The
    hardest negative is the other-class sample with the highest cosine
    similarity to the anchor (lowest batch index on ties).
    """
    if len(batch) == 0:
        return []
    labels = np.array([r.label for r in batch])
    if np.unique(labels).size < 2:
        return []
    emb = np.stack([np.asarray(r.embedding, dtype=np.float64) for r in batch])
    norms = np.linalg.norm(emb, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-norm embedding in batch")
    unit = emb / norms[:, None]
    sims = unit @ unit.T

    rng = np.random.default_rng(seed)
    triplets = []
    for i in range(len(batch)):
        positives = np.flatnonzero((labels == labels[i]) & (np.arange(len(batch)) != i))
        if positives.size == 0:
            continue
        j = positives[rng.integers(positives.size)]
        negatives = np.flatnonzero(labels != labels[i])
        k = negatives[np.argmax(sims[i, negatives])]
        triplets.append(TripletInputs(emb[i], emb[j], emb[k], margin))
    return triplets


def check_gradient(loss_fn: Callable[..., LossResult], inputs: Sequence[np.ndarray],
                   epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(*inputs)`` must return a LossResult whose gradients line up with
    ``inputs``.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    point = [np.array(x, dtype=np.float64) for x in inputs]
    analytic = loss_fn(*point).gradients
    worst = 0.0
    for idx, x in enumerate(point):
        flat = x.reshape(-1)
        grad = np.asarray(analytic[idx]).reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            plus = loss_fn(*point).value
            flat[j] = orig - epsilon
            minus = loss_fn(*point).value
            flat[j] = orig
            numeric = (plus - minus) / (2.0 * epsilon)
            err = abs(grad[j] - numeric) / max(1e-12, abs(grad[j]) + abs(numeric))
            worst = max(worst, err)
    return worst
