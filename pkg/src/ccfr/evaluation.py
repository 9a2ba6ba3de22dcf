"""Top-1/top-n accuracy, retrieval vs classification vs CCFR comparison, and
the (topn, t_sf, t_sc) parameter sweep."""

from __future__ import annotations

import io
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .rerank import (
    GATES,
    SOFTMAX_KEPT,
    THRESHOLD_ONLY,
    PredictionRecord,
    RerankConfig,
    RerankOutcome,
    rerank_batch,
    rerank_from_retrievals,
    retrieve,
    topn_candidates,
)
from .retrieval import Database, query_topm

RETRIEVAL_TOP1 = "retrieval_top1"


@dataclass(frozen=True)
class EvalReport:
    num_queries: int
    top1_accuracy: float
    topn_accuracy: float
    gate_counts: dict[str, int]
    confusions: list[tuple[int, int, int]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "num_queries": self.num_queries,
            "top1_accuracy": self.top1_accuracy,
            "topn_accuracy": self.topn_accuracy,
            "gate_counts": dict(self.gate_counts),
            "confusions": [list(c) for c in self.confusions],
        }


def accuracy(outcomes: Sequence[RerankOutcome], truth: Mapping[str, int]) -> EvalReport:
    """Tally top-1 hits, truth-in-candidates hits, gates and confused pairs.

    ``confusions`` lists (true, predicted, count) for wrong predictions only,
    sorted by count descending then class indices.
    """
    top1 = topn = 0
    gates = Counter({g: 0 for g in GATES})
    confused: Counter = Counter()
    for o in outcomes:
        if o.id not in truth:
            raise KeyError(f"no ground truth for id {o.id!r}")
        t = truth[o.id]
        gates[o.gate] += 1
        if o.predicted_class == t:
            top1 += 1
        else:
            confused[(t, o.predicted_class)] += 1
        if t in o.scores:
            topn += 1
    n = len(outcomes)
    pairs = sorted(((a, b, k) for (a, b), k in confused.items()), key=lambda x: (-x[2], x[0], x[1]))
    return EvalReport(n, top1 / n if n else 0.0, topn / n if n else 0.0, dict(gates), pairs)


def classification_outcome(pred: PredictionRecord, topn: int) -> RerankOutcome:
    cands = topn_candidates(pred.probs, topn)
    return RerankOutcome(pred.id, cands[0], {c: float(pred.probs[c]) for c in cands}, SOFTMAX_KEPT)


def retrieval_outcome(pred_id: str, db: Database, q) -> RerankOutcome:
    best = query_topm(db, q, 1)
    label = int(best.labels[0])
    return RerankOutcome(pred_id, label, {label: float(best.similarities[0])}, RETRIEVAL_TOP1)


def compare_modes(preds: Sequence[PredictionRecord], db: Database, cfg: RerankConfig,
                  truth: Mapping[str, int], queries: Mapping[str, np.ndarray],
                  threads: int = 1) -> dict[str, EvalReport]:
    retrieval, classification = [], []
    for p in preds:
        if p.id not in queries:
            raise KeyError(f"no query embedding for id {p.id!r}")
        retrieval.append(retrieval_outcome(p.id, db, queries[p.id]))
        classification.append(classification_outcome(p, cfg.topn))
    ccfr = rerank_batch(preds, db, cfg, queries, threads)
    return {
        "retrieval": accuracy(retrieval, truth),
        "classification": accuracy(classification, truth),
        "ccfr": accuracy(ccfr, truth),
    }


@dataclass(frozen=True)
class SweepGrid:
    topn_values: tuple[int, ...]
    t_sf_values: tuple[float, ...]
    t_sc_values: tuple[float, ...]
    # shape (len(topn), len(t_sf), len(t_sc))
    accuracy: np.ndarray

    def rows(self):
        for a, n in enumerate(self.topn_values):
            for b, sf in enumerate(self.t_sf_values):
                for c, sc in enumerate(self.t_sc_values):
                    yield n, sf, sc, float(self.accuracy[a, b, c])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("topn,t_sf,t_sc,top1_acc\n")
        for n, sf, sc, acc in self.rows():
            buf.write(f"{n},{sf!r},{sc!r},{acc!r}\n")
        return buf.getvalue()

    def cell(self, topn: int, t_sf: float, t_sc: float) -> float:
        return float(self.accuracy[self.topn_values.index(topn),
                                   self.t_sf_values.index(t_sf),
                                   self.t_sc_values.index(t_sc)])


def default_sweep_config() -> RerankConfig:
    """Sweep defaults: neighbours admitted by t_sc alone, alpha=0, beta=1."""
    return RerankConfig(topm_mode=THRESHOLD_ONLY, alpha=0.0, beta=1.0)


def sweep(preds: Sequence[PredictionRecord], db: Database, truth: Mapping[str, int],
          queries: Mapping[str, np.ndarray], topn_values: Sequence[int],
          t_sf_values: Sequence[float], t_sc_values: Sequence[float],
          base: RerankConfig | None = None, threads: int = 1) -> SweepGrid:
    """Evaluate CCFR top-1 accuracy on the full Cartesian grid.

    Every cell equals ``accuracy(rerank_batch(...))`` under that cell's config.
    Neighbour lists are fetched once per query; only neighbours above the
    smallest t_sc on the grid are kept since no cell can use the others.
    """
    if not (topn_values and t_sf_values and t_sc_values):
        raise ValueError("sweep axes must be non-empty")
    base = base or default_sweep_config()
    topn_values = tuple(int(v) for v in topn_values)
    t_sf_values = tuple(float(v) for v in t_sf_values)
    t_sc_values = tuple(float(v) for v in t_sc_values)
    # Validate every axis value up front.
    for n in topn_values:
        replace(base, topn=n)
    for sf in t_sf_values:
        replace(base, t_sf=sf)
    for sc in t_sc_values:
        replace(base, t_sc=sc)

    for p in preds:
        if p.id not in queries:
            raise KeyError(f"no query embedding for id {p.id!r}")
    min_sc = min(t_sc_values)
    top1 = np.array([float(p.probs.max()) for p in preds])
    labels = np.array([truth[p.id] for p in preds])
    softmax_hit = np.array([topn_candidates(p.probs, 1)[0] == truth[p.id] for p in preds])

    def neighbours(p: PredictionRecord):
        r = retrieve(db, queries[p.id], base)
        return r.take(r.similarities > min_sc)

    def reranked_hits(p: PredictionRecord, r, label: int) -> np.ndarray:
        # Only queries with top1 below some t_sf reach here, so top1 < 1 and
        # t_sf=1 always takes the re-ranking branch.
        hits = np.empty((len(topn_values), len(t_sc_values)), dtype=bool)
        for a, n in enumerate(topn_values):
            for c, sc in enumerate(t_sc_values):
                cfg = replace(base, topn=n, t_sc=sc, t_sf=1.0)
                o = rerank_from_retrievals(p, r, cfg)
                hits[a, c] = o.predicted_class == label
        return hits

    gated = [i for i, p in enumerate(preds) if top1[i] < max(t_sf_values)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rs = list(pool.map(lambda i: neighbours(preds[i]), gated))
            hit_list = list(pool.map(lambda ir: reranked_hits(preds[ir[0]], ir[1], labels[ir[0]]),
                                     zip(gated, rs)))
    else:
        hit_list = [reranked_hits(preds[i], neighbours(preds[i]), labels[i]) for i in gated]

    n_q = len(preds)
    shape = (len(topn_values), len(t_sc_values))
    hits = np.stack(hit_list) if hit_list else np.zeros((0,) + shape, dtype=bool)
    gated_top1 = top1[gated]
    acc = np.zeros((len(topn_values), len(t_sf_values), len(t_sc_values)))
    for b, sf in enumerate(t_sf_values):
        kept_hits = int(softmax_hit[top1 >= sf].sum())
        rr_hits = hits[gated_top1 < sf].sum(axis=0)
        if n_q:
            acc[:, b, :] = (kept_hits + rr_hits) / n_q
    return SweepGrid(topn_values, t_sf_values, t_sc_values, acc)


def parse_axis(text: str, kind=float) -> tuple:
    """Parse '0.4,0.5' or 'start:stop:step' (stop inclusive) into a tuple."""
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) not in (2, 3):
            raise ValueError(f"bad range {text!r}; expected start:stop[:step]")
        start, stop = float(parts[0]), float(parts[1])
        step = float(parts[2]) if len(parts) == 3 else 1.0
        if step <= 0:
            raise ValueError(f"range step must be positive in {text!r}")
        count = int(math.floor((stop - start) / step + 1e-9)) + 1
        if count < 1:
            raise ValueError(f"empty range {text!r}")
        values = [round(start + i * step, 10) for i in range(count)]
    else:
        values = [float(v) for v in text.split(",") if v.strip()]
        if not values:
            raise ValueError(f"empty axis {text!r}")
    if kind is int:
        if any(v != int(v) for v in values):
            raise ValueError(f"integer axis expected, got {text!r}")
        return tuple(int(v) for v in values)
    return tuple(float(v) for v in values)
