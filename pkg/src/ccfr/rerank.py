"""Re-rank low-confidence top-n softmax predictions with retrieval statistics."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from .losses import softmax
from .retrieval import Database, SearchResult, query_all, query_topm

SOFTMAX_KEPT = "softmax_kept"
RERANKED = "reranked"
FALLBACK_SOFTMAX = "fallback_softmax"
GATES = (SOFTMAX_KEPT, RERANKED, FALLBACK_SOFTMAX)

FIXED_TOPM = "fixed_topm"
THRESHOLD_ONLY = "threshold_only"

# Softmax gate defaults by dataset family.
T_SF_CUB = 0.5
T_SF_CARS_AIRCRAFT = 0.7


@dataclass(frozen=True)
class PredictionRecord:
    id: str
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise ValueError(f"prediction {self.id!r}: probs must be a non-empty vector")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValueError(f"prediction {self.id!r}: probabilities must be finite and >= 0")
        if abs(p.sum() - 1.0) > 1e-6:
            raise ValueError(f"prediction {self.id!r}: probabilities sum to {p.sum():.8f}, not 1")
        object.__setattr__(self, "probs", p)

    @classmethod
    def from_logits(cls, id: str, logits) -> "PredictionRecord":
        return cls(id, softmax(logits))


@dataclass(frozen=True)
class RerankConfig:
    topn: int = 5
    topm: int = 50
    t_sf: float = T_SF_CUB
    t_sc: float = 0.7
    alpha: float = 0.0
    beta: float = 1.0
    topm_mode: str = FIXED_TOPM

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            ("topn", self.topn >= 1, "must be >= 1"),
            ("topm", self.topm >= 1, "must be >= 1"),
            ("t_sf", 0.0 <= self.t_sf <= 1.0, "must lie in [0, 1]"),
            ("t_sc", -1.0 <= self.t_sc <= 1.0, "must lie in [-1, 1]"),
            ("alpha", self.alpha >= 0.0, "must be >= 0"),
            ("beta", self.beta >= 0.0, "must be >= 0"),
            ("topm_mode", self.topm_mode in (FIXED_TOPM, THRESHOLD_ONLY),
             f"must be {FIXED_TOPM!r} or {THRESHOLD_ONLY!r}"),
        ]
        for field, ok, msg in checks:
            if not ok:
                raise ValueError(f"{field} {msg}, got {getattr(self, field)!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "RerankConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown rerank config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class RerankOutcome:
    id: str
    predicted_class: int
    scores: dict[int, float]
    gate: str

    @property
    def candidates(self) -> tuple[int, ...]:
        return tuple(self.scores)

    def to_dict(self) -> dict:
        return {"id": self.id, "predicted_class": self.predicted_class, "gate": self.gate,
                "scores": {str(c): s for c, s in self.scores.items()}}


def topn_candidates(probs: np.ndarray, topn: int) -> list[int]:
    """Classes by descending probability, lower index first on ties."""
    order = np.lexsort((np.arange(probs.size), -probs))
    return [int(c) for c in order[:topn]]


def _argmax_lowest(scores: Mapping[int, float]) -> int:
    return min(scores, key=lambda c: (-scores[c], c))


def class_similarity_scores(retrievals: SearchResult, candidates: Sequence[int],
                            t_sc: float) -> dict[int, float]:
    """Per-candidate share of the passing retrieval similarity mass.

    Only neighbours with similarity > t_sc and a label among ``candidates``
    count. An empty dict means nothing passed.
    """
    labels = retrievals.labels
    sims = retrievals.similarities
    passing = sims > t_sc
    numerators = {c: float(sims[passing & (labels == c)].sum()) for c in candidates}
    denom = sum(numerators.values())
    if denom == 0.0:
        return {}
    return {c: n / denom for c, n in numerators.items()}


def retrieve(db: Database, q, cfg: RerankConfig) -> SearchResult:
    if cfg.topm_mode == FIXED_TOPM:
        return query_topm(db, q, cfg.topm)
    return query_all(db, q)


def rerank_from_retrievals(pred: PredictionRecord, retrievals: SearchResult,
                           cfg: RerankConfig) -> RerankOutcome:
    """Apply the confidence gate and re-ranking given precomputed neighbours."""
    probs = pred.probs
    candidates = topn_candidates(probs, cfg.topn)
    softmax_scores = {c: float(probs[c]) for c in candidates}
    if float(probs.max()) >= cfg.t_sf:
        return RerankOutcome(pred.id, candidates[0], softmax_scores, SOFTMAX_KEPT)
    sc = class_similarity_scores(retrievals, candidates, cfg.t_sc)
    if not sc:
        return RerankOutcome(pred.id, candidates[0], softmax_scores, FALLBACK_SOFTMAX)
    scores = {c: cfg.alpha * float(probs[c]) + cfg.beta * sc[c] for c in candidates}
    return RerankOutcome(pred.id, _argmax_lowest(scores), scores, RERANKED)


def rerank_query(pred: PredictionRecord, db: Database, cfg: RerankConfig,
                 queries: Mapping[str, np.ndarray]) -> RerankOutcome:
    if pred.id not in queries:
        raise KeyError(f"no query embedding for id {pred.id!r}")
    # Confident predictions never touch the database.
    if float(pred.probs.max()) >= cfg.t_sf:
        return rerank_from_retrievals(pred, SearchResult((), np.empty(0, np.int64), np.empty(0)), cfg)
    return rerank_from_retrievals(pred, retrieve(db, queries[pred.id], cfg), cfg)


def rerank_batch(preds: Sequence[PredictionRecord], db: Database, cfg: RerankConfig,
                 queries: Mapping[str, np.ndarray], threads: int = 1) -> list[RerankOutcome]:
    for p in preds:
        if p.id not in queries:
            raise KeyError(f"no query embedding for id {p.id!r}")
    if threads <= 1 or len(preds) < 2:
        return [rerank_query(p, db, cfg, queries) for p in preds]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda p: rerank_query(p, db, cfg, queries), preds))
