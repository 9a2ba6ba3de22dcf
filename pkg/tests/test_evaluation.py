import numpy as np
import pytest

from ccfr.evaluation import (
    RETRIEVAL_TOP1,
    accuracy,
    classification_outcome,
    compare_modes,
    default_sweep_config,
    parse_axis,
    sweep,
)
from ccfr.rerank import (
    FALLBACK_SOFTMAX,
    FIXED_TOPM,
    RERANKED,
    SOFTMAX_KEPT,
    THRESHOLD_ONLY,
    PredictionRecord,
    RerankConfig,
    RerankOutcome,
    rerank_batch,
)
from ccfr.retrieval import EmbeddingRecord, build_database
from ccfr.synthetic import FixtureParams, make_fixture


def outcome(qid, pred, cands=(0, 1), gate=SOFTMAX_KEPT):
    return RerankOutcome(qid, pred, {c: 1.0 / len(cands) for c in cands}, gate)


@pytest.fixture(scope="module")
def small():
    params = FixtureParams(num_classes=20, train_per_class=8, test_per_class=5, dim=16)
    fx = make_fixture(params, seed=3)
    return fx, build_database(fx.train)


class TestAccuracy:
    def test_all_correct(self):
        outs = [outcome(f"q{i}", i % 2) for i in range(6)]
        truth = {f"q{i}": i % 2 for i in range(6)}
        r = accuracy(outs, truth)
        assert r.top1_accuracy == 1.0 and r.topn_accuracy == 1.0 and r.confusions == []

    def test_none_correct(self):
        outs = [outcome(f"q{i}", 0) for i in range(4)]
        r = accuracy(outs, {f"q{i}": 1 for i in range(4)})
        assert r.top1_accuracy == 0.0
        assert r.confusions == [(1, 0, 4)]

    def test_hand_tally(self):
        # (truth, predicted, candidates, gate)
        rows = [
            (0, 0, (0, 1), SOFTMAX_KEPT),
            (1, 1, (1, 0), RERANKED),
            (2, 3, (3, 2), RERANKED),
            (2, 3, (3, 4), SOFTMAX_KEPT),
            (4, 4, (4,), FALLBACK_SOFTMAX),
            (5, 6, (6, 7), SOFTMAX_KEPT),
            (3, 3, (3, 2), RERANKED),
            (7, 7, (7, 6), SOFTMAX_KEPT),
            (6, 5, (5, 6), RERANKED),
            (1, 1, (1, 2), SOFTMAX_KEPT),
        ]
        outs = [outcome(f"q{i}", p, c, g) for i, (_, p, c, g) in enumerate(rows)]
        truth = {f"q{i}": t for i, (t, *_rest) in enumerate(rows)}
        r = accuracy(outs, truth)
        assert r.num_queries == 10
        assert r.top1_accuracy == pytest.approx(6 / 10)
        assert r.topn_accuracy == pytest.approx(8 / 10)
        assert r.gate_counts == {SOFTMAX_KEPT: 5, RERANKED: 4, FALLBACK_SOFTMAX: 1}
        assert r.confusions == [(2, 3, 2), (5, 6, 1), (6, 5, 1)]

    def test_gate_counts_sum(self, small):
        fx, db = small
        outs = rerank_batch(fx.predictions, db, RerankConfig(), fx.query_embeddings)
        r = accuracy(outs, fx.truth)
        assert sum(r.gate_counts.values()) == r.num_queries == len(fx.queries)
        assert 0.0 <= r.top1_accuracy <= r.topn_accuracy <= 1.0

    def test_missing_truth(self):
        with pytest.raises(KeyError, match="q9"):
            accuracy([outcome("q9", 0)], {})

    def test_empty(self):
        assert accuracy([], {}).top1_accuracy == 0.0


class TestCompareModes:
    def test_retrieval_perfect(self):
        train = [EmbeddingRecord("a", 0, [1.0, 0.0, 0.0]), EmbeddingRecord("b", 1, [0.0, 1.0, 0.0]),
                 EmbeddingRecord("c", 2, [0.0, 0.0, 1.0])]
        queries = {"q0": np.array([0.9, 0.1, 0.0]), "q1": np.array([0.1, 0.8, 0.2]),
                   "q2": np.array([0.0, 0.3, 0.7])}
        preds = [PredictionRecord(q, [0.2, 0.5, 0.3]) for q in queries]
        truth = {"q0": 0, "q1": 1, "q2": 2}
        reports = compare_modes(preds, build_database(train), RerankConfig(topn=3), truth, queries)
        assert reports["retrieval"].top1_accuracy == 1.0
        assert reports["retrieval"].gate_counts[RETRIEVAL_TOP1] == 3
        assert reports["classification"].top1_accuracy == pytest.approx(1 / 3)

    def test_gate_off_equals_classification(self, small):
        fx, db = small
        reports = compare_modes(fx.predictions, db, RerankConfig(t_sf=0.0), fx.truth, fx.query_embeddings)
        c, x = reports["classification"].to_dict(), reports["ccfr"].to_dict()
        assert c == x

    def test_classification_ignores_db(self, small):
        fx, db = small
        other = build_database(fx.train[::3])
        a = compare_modes(fx.predictions, db, RerankConfig(), fx.truth, fx.query_embeddings)
        b = compare_modes(fx.predictions, other, RerankConfig(), fx.truth, fx.query_embeddings)
        assert a["classification"] == b["classification"]

    def test_ccfr_not_worse_on_fixture(self, small):
        fx, db = small
        r = compare_modes(fx.predictions, db, RerankConfig(), fx.truth, fx.query_embeddings)
        assert r["ccfr"].top1_accuracy >= r["classification"].top1_accuracy

    def test_classification_outcome(self):
        o = classification_outcome(PredictionRecord("q", [0.1, 0.3, 0.6]), 2)
        assert o.predicted_class == 2 and list(o.scores) == [2, 1]


class TestSweep:
    def test_single_cell(self, small):
        fx, db = small
        grid = sweep(fx.predictions, db, fx.truth, fx.query_embeddings, [3], [0.6], [0.7])
        cfg = RerankConfig(topn=3, t_sf=0.6, t_sc=0.7, topm_mode=THRESHOLD_ONLY)
        direct = accuracy(rerank_batch(fx.predictions, db, cfg, fx.query_embeddings), fx.truth)
        assert grid.accuracy.shape == (1, 1, 1)
        assert grid.cell(3, 0.6, 0.7) == direct.top1_accuracy

    @pytest.mark.parametrize("mode", [FIXED_TOPM, THRESHOLD_ONLY])
    def test_every_cell_matches_rerank_batch(self, small, mode):
        fx, db = small
        base = RerankConfig(topm=10, topm_mode=mode)
        topns, sfs, scs = [1, 2, 4], [0.0, 0.5, 0.9, 1.0], [0.3, 0.7, 0.9]
        grid = sweep(fx.predictions, db, fx.truth, fx.query_embeddings, topns, sfs, scs, base=base)
        for n, sf, sc, acc in grid.rows():
            cfg = RerankConfig(topn=n, topm=10, t_sf=sf, t_sc=sc, topm_mode=mode)
            outs = rerank_batch(fx.predictions, db, cfg, fx.query_embeddings)
            assert acc == accuracy(outs, fx.truth).top1_accuracy, (n, sf, sc)

    def test_gate_off_column_is_classification(self, small):
        fx, db = small
        grid = sweep(fx.predictions, db, fx.truth, fx.query_embeddings, [2, 3, 5], [0.0, 0.7], [0.5, 0.8])
        cls = np.mean([int(np.argmax(p.probs)) == fx.truth[p.id] for p in fx.predictions])
        assert np.all(grid.accuracy[:, 0, :] == cls)

    def test_threads_do_not_matter(self, small):
        fx, db = small
        args = (fx.predictions, db, fx.truth, fx.query_embeddings, [2, 3], [0.5, 0.8], [0.6, 0.75])
        assert sweep(*args, threads=1).to_csv() == sweep(*args, threads=3).to_csv()

    def test_csv(self, small):
        fx, db = small
        grid = sweep(fx.predictions, db, fx.truth, fx.query_embeddings, [2, 3], [0.5], [0.6, 0.7, 0.8])
        lines = grid.to_csv().splitlines()
        assert lines[0] == "topn,t_sf,t_sc,top1_acc"
        assert len(lines) == 1 + 6
        assert lines[1].startswith("2,0.5,0.6,")

    def test_empty_axis(self, small):
        fx, db = small
        with pytest.raises(ValueError):
            sweep(fx.predictions, db, fx.truth, fx.query_embeddings, [], [0.5], [0.5])

    def test_invalid_axis_value(self, small):
        fx, db = small
        with pytest.raises(ValueError, match="topn"):
            sweep(fx.predictions, db, fx.truth, fx.query_embeddings, [0], [0.5], [0.5])

    def test_default_config(self):
        cfg = default_sweep_config()
        assert cfg.topm_mode == THRESHOLD_ONLY and (cfg.alpha, cfg.beta) == (0.0, 1.0)


class TestParseAxis:
    @pytest.mark.parametrize("text,kind,expected", [
        ("2:6:1", int, (2, 3, 4, 5, 6)),
        ("2:6", int, (2, 3, 4, 5, 6)),
        ("0.5,0.7", float, (0.5, 0.7)),
        ("0.4:0.5:0.05", float, (0.4, 0.45, 0.5)),
    ])
    def test_values(self, text, kind, expected):
        assert parse_axis(text, kind) == expected

    def test_grid_lengths(self):
        assert len(parse_axis("0.4:0.95:0.05")) == 12
        assert len(parse_axis("0.5:0.95:0.05")) == 10
        assert parse_axis("0.4:0.95:0.05")[-1] == 0.95

    @pytest.mark.parametrize("text,kind", [("1:2:0", float), ("3:1", float), ("", float),
                                           ("1.5,2", int), ("1:2:3:4", float)])
    def test_rejects(self, text, kind):
        with pytest.raises(ValueError):
            parse_axis(text, kind)
