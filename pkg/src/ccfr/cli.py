"""``ccfr`` command-line entry point.

Settings resolve as flags > ``--config`` JSON file > built-in defaults. Every
output file is written atomically. Set ``CCFR_LOG`` (DEBUG, INFO, WARNING...)
to control log verbosity on stderr.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import io as ccfr_io
from .evaluation import accuracy, compare_modes, parse_axis, sweep
from .features import FusionWeights, assemble_embedding
from .geometry import (
    DEFAULT_KEEP_PER_SCALE,
    DEFAULT_NMS_THRESHOLD,
    AnchorSpec,
    scale_separated_nms,
)
from .gradcheck import format_table, run_suite
from .hierarchy import build_hierarchy, class_means, default_num_super
from .rerank import FIXED_TOPM, THRESHOLD_ONLY, RerankConfig, RerankOutcome, rerank_batch
from .retrieval import Database, EmbeddingRecord, build_database, encode_database
from .synthetic import FixtureParams, make_fixture

log = logging.getLogger("ccfr")

SUBCOMMANDS = ("build-db", "hierarchy", "fuse", "nms", "rerank", "eval", "sweep",
               "loss-check", "gen-fixture")

# Default sweep grid.
SWEEP_TOPN = "2:6:1"
SWEEP_T_SF = "0.4:0.95:0.05"
SWEEP_T_SC = "0.5:0.95:0.05"


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field."""


@dataclass
class RunConfig:
    command: str
    paths: dict[str, Path | None] = field(default_factory=dict)
    rerank: RerankConfig = field(default_factory=RerankConfig)
    anchors: AnchorSpec = field(default_factory=AnchorSpec)
    nms_threshold: float = DEFAULT_NMS_THRESHOLD
    keep_per_scale: int = DEFAULT_KEEP_PER_SCALE
    seed: int = 0
    threads: int = 1
    options: dict[str, Any] = field(default_factory=dict)


# name -> (flag dest, input?) for every path-valued flag.
_PATH_FLAGS = {
    "embeddings": True, "bundle": True, "weights": True, "boxes": True, "db": True,
    "preds": True, "queries": True, "outcomes": True, "truth": True,
    "out": False, "out_dir": False,
}
_RERANK_FIELDS = {f.name for f in fields(RerankConfig)}
_ANCHOR_FIELDS = {"image_size", "scales", "strides"}
_CONFIG_KEYS = _RERANK_FIELDS | _ANCHOR_FIELDS | {"nms_threshold", "keep_per_scale", "seed", "threads"}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file of settings (flags override it)")
    p.add_argument("--seed", type=int, help="seed for every stochastic step (default 0)")
    p.add_argument("--threads", type=int, help="worker threads; results never depend on it")


def _add_rerank_flags(p: argparse.ArgumentParser, axes: bool = False) -> None:
    if axes:
        p.add_argument("--topn", help=f"comma list or start:stop:step (default {SWEEP_TOPN})")
        p.add_argument("--t-sf", dest="t_sf", help=f"softmax gate axis (default {SWEEP_T_SF})")
        p.add_argument("--t-sc", dest="t_sc", help=f"similarity threshold axis (default {SWEEP_T_SC})")
    else:
        p.add_argument("--topn", type=int, help="softmax candidates to re-rank (default 5)")
        p.add_argument("--t-sf", dest="t_sf", type=float, help="softmax confidence gate (default 0.5)")
        p.add_argument("--t-sc", dest="t_sc", type=float, help="neighbour similarity threshold (default 0.7)")
    p.add_argument("--topm", type=int, help="neighbours retrieved per query (default 50)")
    p.add_argument("--alpha", type=float, help="softmax weight in the re-ranked score (default 0)")
    p.add_argument("--beta", type=float, help="retrieval weight in the re-ranked score (default 1)")
    p.add_argument("--topm-mode", dest="topm_mode", choices=(FIXED_TOPM, THRESHOLD_ONLY),
                   help=f"neighbour admission (default {FIXED_TOPM}; sweep defaults to {THRESHOLD_ONLY})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ccfr",
        description="Coarse classification + fine re-ranking toolkit.",
        epilog="subcommands: " + ", ".join(SUBCOMMANDS) + ". Run 'ccfr <subcommand> --help' for flags.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    p = sub.add_parser("build-db", help="index training embeddings into a binary database")
    _add_common(p)
    p.add_argument("--embeddings", type=Path, required=True, help="embedding JSONL")
    p.add_argument("--out", type=Path, required=True, help="database file to write")

    p = sub.add_parser("hierarchy", help="cluster class means into super classes")
    _add_common(p)
    p.add_argument("--embeddings", type=Path, required=True, help="embedding JSONL")
    p.add_argument("--num-super", dest="num_super", type=int,
                   help="number of super classes (default round(C/4))")
    p.add_argument("--out", type=Path, required=True, help="hierarchy JSON to write")

    p = sub.add_parser("fuse", help="assemble embeddings from global + local region features")
    _add_common(p)
    p.add_argument("--bundle", type=Path, required=True, help="feature bundle JSONL")
    p.add_argument("--weights", type=Path, required=True, help="fusion weights JSON")
    p.add_argument("--out", type=Path, required=True, help="embedding JSONL to write")
    p.add_argument("--no-normalize", dest="normalize", action="store_false",
                   help="skip L2 normalisation of the assembled embedding")

    p = sub.add_parser("nms", help="scale-separated NMS over box JSONL (grouped by id)")
    _add_common(p)
    p.add_argument("--boxes", type=Path, required=True, help="box JSONL")
    p.add_argument("--out", type=Path, required=True, help="surviving boxes JSONL")
    p.add_argument("--iou-threshold", dest="nms_threshold", type=float, help="default 0.25")
    p.add_argument("--keep-per-scale", dest="keep_per_scale", type=int, help="default 2")

    p = sub.add_parser("rerank", help="re-rank predictions against the database")
    _add_common(p)
    p.add_argument("--db", type=Path, required=True, help="database file")
    p.add_argument("--preds", type=Path, required=True, help="prediction JSONL")
    p.add_argument("--queries", type=Path, required=True, help="query embedding JSONL")
    p.add_argument("--out", type=Path, required=True, help="outcome JSONL to write")
    _add_rerank_flags(p)

    p = sub.add_parser("eval", help="accuracy report for outcomes, or compare all three modes")
    _add_common(p)
    p.add_argument("--outcomes", type=Path, help="rerank outcome JSONL")
    p.add_argument("--truth", type=Path, help="JSONL with id and label (e.g. the query embeddings)")
    p.add_argument("--db", type=Path, help="database file (comparison mode)")
    p.add_argument("--preds", type=Path, help="prediction JSONL (comparison mode)")
    p.add_argument("--queries", type=Path, help="query embedding JSONL (comparison mode)")
    p.add_argument("--out", type=Path, required=True, help="report JSON to write")
    _add_rerank_flags(p)

    p = sub.add_parser("sweep", help="accuracy grid over topn x t_sf x t_sc, as CSV")
    _add_common(p)
    p.add_argument("--db", type=Path, required=True, help="database file")
    p.add_argument("--preds", type=Path, required=True, help="prediction JSONL")
    p.add_argument("--queries", type=Path, required=True, help="query embedding JSONL with labels")
    p.add_argument("--out", type=Path, required=True, help="CSV to write")
    _add_rerank_flags(p, axes=True)

    p = sub.add_parser("loss-check", help="finite-difference check of every loss gradient")
    _add_common(p)
    p.add_argument("--instances", type=int, default=100, help="random instances per loss")
    p.add_argument("--epsilon", type=float, default=1e-5, help="central difference step")

    p = sub.add_parser("gen-fixture", help="write the synthetic train/query/prediction fixture")
    _add_common(p)
    p.add_argument("--out-dir", dest="out_dir", type=Path, required=True)
    defaults = FixtureParams()
    p.add_argument("--classes", type=int, default=defaults.num_classes)
    p.add_argument("--train-per-class", dest="train_per_class", type=int, default=defaults.train_per_class)
    p.add_argument("--test-per-class", dest="test_per_class", type=int, default=defaults.test_per_class)
    p.add_argument("--dim", type=int, default=defaults.dim)
    p.add_argument("--confusable-fraction", dest="confusable_fraction", type=float,
                   default=defaults.confusable_fraction)
    return parser


def _load_config_file(path: Path | None) -> dict:
    if path is None:
        return {}
    if not path.is_file():
        raise ConfigError(f"config: file not found: {path}")
    data = ccfr_io.read_json(path)
    unknown = sorted(set(data) - _CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown config key")
    return data


def parse_and_validate(argv: Sequence[str] | None = None) -> RunConfig:
    args = build_parser().parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if v is not None}
    settings = _load_config_file(flags.pop("config", None))
    command = flags.pop("command")
    axes = command == "sweep"
    for key in list(flags):
        if key in _CONFIG_KEYS and not (axes and key in ("topn", "t_sf", "t_sc")):
            settings[key] = flags.pop(key)

    paths = {}
    for name, is_input in _PATH_FLAGS.items():
        if name in flags:
            path = flags.pop(name)
            if is_input and not path.is_file():
                raise ConfigError(f"{name}: file not found: {path}")
            paths[name] = path

    def checked(name, value, ok, msg):
        if not ok(value):
            raise ConfigError(f"{name}: {msg}, got {value!r}")
        return value

    rerank_kw = {k: settings[k] for k in _RERANK_FIELDS if k in settings}
    if command == "sweep":
        rerank_kw.setdefault("topm_mode", THRESHOLD_ONLY)
        # Axis defaults may come from a scalar in the config file.
        for key, default in (("topn", SWEEP_TOPN), ("t_sf", SWEEP_T_SF), ("t_sc", SWEEP_T_SC)):
            raw = flags.pop(key, None)
            if raw is None:
                raw = str(rerank_kw[key]) if key in rerank_kw else default
            try:
                flags[f"{key}_axis"] = parse_axis(raw, int if key == "topn" else float)
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from None
            rerank_kw.pop(key, None)
    try:
        rerank = RerankConfig(**rerank_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc).replace(" must", ": must", 1)) from None
    if command == "sweep":
        for key in ("topn", "t_sf", "t_sc"):
            for v in flags[f"{key}_axis"]:
                try:
                    replace(rerank, **{key: v})
                except ValueError as exc:
                    raise ConfigError(str(exc).replace(" must", ": must", 1)) from None

    anchor_kw = {k: settings[k] for k in _ANCHOR_FIELDS if k in settings}
    try:
        anchors = AnchorSpec(**anchor_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"anchors: {exc}") from None

    nms_threshold = checked("nms_threshold", float(settings.get("nms_threshold", DEFAULT_NMS_THRESHOLD)),
                            lambda v: 0.0 < v <= 1.0, "must lie in (0, 1]")
    keep = checked("keep_per_scale", int(settings.get("keep_per_scale", DEFAULT_KEEP_PER_SCALE)),
                   lambda v: v >= 1, "must be >= 1")
    seed = int(settings.get("seed", 0))
    threads = checked("threads", int(settings.get("threads", 1)), lambda v: v >= 1, "must be >= 1")

    if command == "hierarchy" and "num_super" in flags:
        checked("num_super", flags["num_super"], lambda v: v >= 1, "must be >= 1")
    if command == "loss-check":
        checked("instances", flags["instances"], lambda v: v >= 1, "must be >= 1")
        checked("epsilon", flags["epsilon"], lambda v: v > 0, "must be > 0")
    if command == "gen-fixture":
        for key in ("classes", "train_per_class", "test_per_class", "dim"):
            checked(key, flags[key], lambda v: v >= 1, "must be >= 1")
        checked("confusable_fraction", flags["confusable_fraction"],
                lambda v: 0.0 <= v <= 1.0, "must lie in [0, 1]")
    if command == "eval":
        compare = all(k in paths for k in ("db", "preds", "queries"))
        if not compare and not ("outcomes" in paths and "truth" in paths):
            raise ConfigError("outcomes: eval needs --outcomes with --truth, "
                              "or --db, --preds and --queries")

    return RunConfig(command, paths, rerank, anchors, nms_threshold, keep, seed, threads, flags)


@contextlib.contextmanager
def _stage(name: str):
    start = time.perf_counter()
    yield
    log.info("%s: %.3f s", name, time.perf_counter() - start)


def _read_embeddings(path) -> list[EmbeddingRecord]:
    with _stage(f"read {path}"):
        records = ccfr_io.read_jsonl(path, ccfr_io.parse_embedding)
    log.info("read %d embedding records from %s", len(records), path)
    return records


def _read_predictions(path):
    with _stage(f"read {path}"):
        preds = ccfr_io.read_jsonl(path, ccfr_io.parse_prediction)
    log.info("read %d predictions from %s", len(preds), path)
    return preds


def _load_db(path) -> Database:
    with _stage(f"load database {path}"):
        db = Database.load(path)
    log.info("database: %d records, dim %d", len(db), db.dim)
    return db


def _queries(path) -> tuple[dict[str, np.ndarray], dict[str, int]]:
    records = _read_embeddings(path)
    return {r.id: r.embedding for r in records}, {r.id: r.label for r in records}


def _json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _cmd_build_db(cfg: RunConfig) -> int:
    records = _read_embeddings(cfg.paths["embeddings"])
    with _stage("build database"):
        data = encode_database(build_database(records))
    ccfr_io.atomic_write_bytes(cfg.paths["out"], data)
    log.info("wrote database with %d records to %s", len(records), cfg.paths["out"])
    return 0


def _cmd_hierarchy(cfg: RunConfig) -> int:
    records = _read_embeddings(cfg.paths["embeddings"])
    num_classes = max(r.label for r in records) + 1
    num_super = cfg.options.get("num_super", default_num_super(num_classes))
    if num_super > num_classes:
        raise ConfigError(f"num_super: must be <= number of classes ({num_classes}), got {num_super}")
    with _stage("cluster class means"):
        h = build_hierarchy(class_means(records, num_classes), num_super)
    ccfr_io.atomic_write_text(cfg.paths["out"], h.to_json() + "\n")
    log.info("wrote hierarchy: %d children -> %d super classes", h.num_children, h.num_super)
    return 0


def _cmd_fuse(cfg: RunConfig) -> int:
    weights = FusionWeights.from_dict(ccfr_io.read_json(cfg.paths["weights"]))
    bundles = ccfr_io.read_jsonl(cfg.paths["bundle"], ccfr_io.parse_bundle)
    normalize = cfg.options.get("normalize", True)
    rows = []
    with _stage("assemble embeddings"):
        for bid, label, bundle in bundles:
            emb = assemble_embedding(bundle, weights, normalize)
            row = {"id": bid}
            if label is not None:
                row["label"] = label
            row["embedding"] = emb.tolist()
            rows.append(row)
    ccfr_io.atomic_write_text(cfg.paths["out"], ccfr_io.dumps_jsonl(rows))
    log.info("wrote %d embeddings", len(rows))
    return 0


def _cmd_nms(cfg: RunConfig) -> int:
    pairs = ccfr_io.read_jsonl(cfg.paths["boxes"], ccfr_io.parse_box)
    groups: dict[str, list] = {}
    for image_id, box in pairs:
        groups.setdefault(image_id, []).append(box)
    rows = []
    with _stage("scale-separated nms"):
        for image_id, boxes in groups.items():
            for box in scale_separated_nms(boxes, cfg.nms_threshold, cfg.keep_per_scale):
                rows.append(ccfr_io.box_to_dict(image_id, box))
    ccfr_io.atomic_write_text(cfg.paths["out"], ccfr_io.dumps_jsonl(rows))
    log.info("kept %d of %d boxes across %d groups", len(rows), len(pairs), len(groups))
    return 0


def _cmd_rerank(cfg: RunConfig) -> int:
    db = _load_db(cfg.paths["db"])
    preds = _read_predictions(cfg.paths["preds"])
    queries, _ = _queries(cfg.paths["queries"])
    with _stage("rerank"):
        outcomes = rerank_batch(preds, db, cfg.rerank, queries, cfg.threads)
    ccfr_io.atomic_write_text(cfg.paths["out"], ccfr_io.dumps_jsonl(o.to_dict() for o in outcomes))
    log.info("wrote %d outcomes", len(outcomes))
    return 0


def _parse_outcome(obj: dict) -> RerankOutcome:
    scores = {int(c): float(s) for c, s in obj["scores"].items()}
    return RerankOutcome(str(obj["id"]), int(obj["predicted_class"]), scores, str(obj["gate"]))


def _cmd_eval(cfg: RunConfig) -> int:
    if all(k in cfg.paths for k in ("db", "preds", "queries")):
        db = _load_db(cfg.paths["db"])
        preds = _read_predictions(cfg.paths["preds"])
        queries, truth = _queries(cfg.paths["queries"])
        if "truth" in cfg.paths:
            _, truth = _queries(cfg.paths["truth"])
        with _stage("compare modes"):
            reports = compare_modes(preds, db, cfg.rerank, truth, queries, cfg.threads)
        out = {name: r.to_dict() for name, r in reports.items()}
    else:
        outcomes = ccfr_io.read_jsonl(cfg.paths["outcomes"], _parse_outcome)
        _, truth = _queries(cfg.paths["truth"])
        out = accuracy(outcomes, truth).to_dict()
    ccfr_io.atomic_write_text(cfg.paths["out"], _json_text(out))
    return 0


def _cmd_sweep(cfg: RunConfig) -> int:
    db = _load_db(cfg.paths["db"])
    preds = _read_predictions(cfg.paths["preds"])
    queries, truth = _queries(cfg.paths["queries"])
    o = cfg.options
    with _stage("sweep"):
        grid = sweep(preds, db, truth, queries, o["topn_axis"], o["t_sf_axis"], o["t_sc_axis"],
                     base=cfg.rerank, threads=cfg.threads)
    ccfr_io.atomic_write_text(cfg.paths["out"], grid.to_csv())
    log.info("wrote %d sweep cells", grid.accuracy.size)
    return 0


def _cmd_loss_check(cfg: RunConfig) -> int:
    with _stage("gradient suite"):
        rows = run_suite(cfg.options["instances"], cfg.seed, cfg.options["epsilon"])
    print(format_table(rows))
    return 0 if all(r.passed for r in rows) else 1


def _cmd_gen_fixture(cfg: RunConfig) -> int:
    o = cfg.options
    params = FixtureParams(num_classes=o["classes"], train_per_class=o["train_per_class"],
                           test_per_class=o["test_per_class"], dim=o["dim"],
                           confusable_fraction=o["confusable_fraction"])
    with _stage("generate fixture"):
        fx = make_fixture(params, cfg.seed)
    out = cfg.paths["out_dir"]
    ccfr_io.atomic_write_text(out / "train.jsonl",
                              ccfr_io.dumps_jsonl(ccfr_io.embedding_to_dict(r) for r in fx.train))
    ccfr_io.atomic_write_text(out / "queries.jsonl",
                              ccfr_io.dumps_jsonl(ccfr_io.embedding_to_dict(r) for r in fx.queries))
    ccfr_io.atomic_write_text(out / "preds.jsonl",
                              ccfr_io.dumps_jsonl({"id": p.id, "probs": p.probs.tolist()}
                                                  for p in fx.predictions))
    log.info("wrote fixture: %d train, %d queries to %s", len(fx.train), len(fx.queries), out)
    return 0


_COMMANDS = {
    "build-db": _cmd_build_db,
    "hierarchy": _cmd_hierarchy,
    "fuse": _cmd_fuse,
    "nms": _cmd_nms,
    "rerank": _cmd_rerank,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "loss-check": _cmd_loss_check,
    "gen-fixture": _cmd_gen_fixture,
}


def run_pipeline(cfg: RunConfig) -> int:
    try:
        return _COMMANDS[cfg.command](cfg)
    except ConfigError as exc:
        print(f"ccfr: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"ccfr {cfg.command}: error: {msg}", file=sys.stderr)
        return 1


def _setup_logging() -> None:
    level = os.environ.get("CCFR_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    try:
        cfg = parse_and_validate(argv)
    except ConfigError as exc:
        print(f"ccfr: error: {exc}", file=sys.stderr)
        return 2
    except ccfr_io.InputError as exc:
        print(f"ccfr: error: {exc}", file=sys.stderr)
        return 2
    return run_pipeline(cfg)


if __name__ == "__main__":
    sys.exit(main())
