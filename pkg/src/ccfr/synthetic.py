"""Seeded synthetic dataset: Gaussian class clusters plus a noisy softmax head.

A fraction of classes is arranged in confusable pairs. Pair partners sit close
together in embedding space (but remain separable by nearest neighbours), and
the softmax head splits its confidence between the two partners, so those
queries are exactly the low-confidence cases re-ranking is meant to fix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import softmax
from .rerank import PredictionRecord
from .retrieval import EmbeddingRecord


@dataclass(frozen=True)
class FixtureParams:
    num_classes: int = 200
    train_per_class: int = 30
    test_per_class: int = 20
    dim: int = 64
    confusable_fraction: float = 0.2
    # Embedding noise per coordinate and cosine between paired class centres.
    noise: float = 0.08
    pair_cosine: float = 0.85
    # Softmax head: background logit noise, logit boost for the true class,
    # and the boost shared by both members of a confusable pair.
    logit_noise: float = 1.0
    confident_boost: float = 9.0
    pair_boost: float = 7.0
    pair_jitter: float = 0.7

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ValueError("per-class sample counts must be >= 1")
        if not 0.0 <= self.confusable_fraction <= 1.0:
            raise ValueError("confusable_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class Fixture:
    train: list[EmbeddingRecord]
    queries: list[EmbeddingRecord]
    predictions: list[PredictionRecord]
    partner: dict[int, int]

    @property
    def truth(self) -> dict[str, int]:
        return {q.id: q.label for q in self.queries}

    @property
    def query_embeddings(self) -> dict[str, np.ndarray]:
        return {q.id: q.embedding for q in self.queries}


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def make_fixture(params: FixtureParams | None = None, seed: int = 0) -> Fixture:
    p = params or FixtureParams()
    rng = np.random.default_rng(seed)
    c, e = p.num_classes, p.dim

    centers = _unit(rng.normal(size=(c, e)))
    n_pairs = int(round(p.confusable_fraction * c / 2))
    order = rng.permutation(c)
    partner: dict[int, int] = {}
    for k in range(n_pairs):
        a, b = int(order[2 * k]), int(order[2 * k + 1])
        partner[a], partner[b] = b, a
        # Rotate b's centre so cos(a, b) == pair_cosine exactly.
        ortho = centers[b] - np.dot(centers[b], centers[a]) * centers[a]
        ortho /= np.linalg.norm(ortho)
        centers[b] = p.pair_cosine * centers[a] + np.sqrt(1 - p.pair_cosine**2) * ortho

    def sample(label: int) -> np.ndarray:
        return _unit(centers[label] + p.noise * rng.normal(size=e))

    train = [
        EmbeddingRecord(f"train-{label:04d}-{i:03d}", label, sample(label))
        for label in range(c) for i in range(p.train_per_class)
    ]
    queries, predictions = [], []
    for label in range(c):
        for i in range(p.test_per_class):
            qid = f"test-{label:04d}-{i:03d}"
            queries.append(EmbeddingRecord(qid, label, sample(label)))
            logits = p.logit_noise * rng.normal(size=c)
            if label in partner:
                logits[label] += p.pair_boost + p.pair_jitter * rng.normal()
                logits[partner[label]] += p.pair_boost + p.pair_jitter * rng.normal()
            else:
                logits[label] += p.confident_boost
            predictions.append(PredictionRecord(qid, softmax(logits)))
    return Fixture(train, queries, predictions, partner)
