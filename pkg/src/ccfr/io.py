"""JSONL/JSON ingestion and atomic file output."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Callable, Iterable, Iterator, TypeVar

import numpy as np

from .features import FeatureBundle
from .geometry import Box
from .rerank import PredictionRecord
from .retrieval import EmbeddingRecord

T = TypeVar("T")


class InputError(ValueError):
    """Malformed input file; the message names the file and line."""


def iter_jsonl(path) -> Iterator[tuple[int, dict]]:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise InputError(f"{path}: line {lineno}: expected a JSON object")
            yield lineno, obj


def read_jsonl(path, parse: Callable[[dict], T]) -> list[T]:
    out = []
    for lineno, obj in iter_jsonl(path):
        try:
            out.append(parse(obj))
        except (KeyError, TypeError, ValueError) as exc:
            detail = f"missing key {exc}" if isinstance(exc, KeyError) else str(exc)
            raise InputError(f"{path}: line {lineno}: {detail}") from None
    return out


def _vector(values, name: str) -> np.ndarray:
    if not isinstance(values, list) or not values:
        raise ValueError(f"{name} must be a non-empty list of numbers")
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or not np.all(np.isfinite(v)):
        raise ValueError(f"{name} must be a flat list of finite numbers")
    return v


def parse_embedding(obj: dict) -> EmbeddingRecord:
    label = obj["label"]
    if not isinstance(label, int) or isinstance(label, bool):
        raise ValueError(f"label must be an integer, got {label!r}")
    return EmbeddingRecord(str(obj["id"]), label, _vector(obj["embedding"], "embedding"))


def parse_prediction(obj: dict) -> PredictionRecord:
    has_logits, has_probs = "logits" in obj, "probs" in obj
    if has_logits == has_probs:
        raise ValueError("prediction needs exactly one of 'logits' or 'probs'")
    if has_logits:
        return PredictionRecord.from_logits(str(obj["id"]), _vector(obj["logits"], "logits"))
    return PredictionRecord(str(obj["id"]), _vector(obj["probs"], "probs"))


def parse_box(obj: dict) -> tuple[str, Box]:
    coords = obj["box"]
    if not isinstance(coords, list) or len(coords) != 4:
        raise ValueError("box must be [x1, y1, x2, y2]")
    x1, y1, x2, y2 = (float(c) for c in coords)
    return str(obj["id"]), Box(x1, y1, x2, y2, int(obj["scale"]), float(obj.get("score", 0.0)))


def box_to_dict(image_id: str, box: Box) -> dict:
    return {"id": image_id, "scale": box.scale_index, "box": list(box.coords), "score": box.score}


def parse_bundle(obj: dict) -> tuple[str, int | None, FeatureBundle]:
    """{"id", "label"?, "global": [...], "locals": [[[...], ...], ...]} -> bundle."""
    g = _vector(obj["global"], "global")
    scales = obj["locals"]
    if not isinstance(scales, list):
        raise ValueError("locals must be a list with one entry per scale")
    local = tuple(tuple(_vector(v, "locals") for v in scale) for scale in scales)
    label = obj.get("label")
    return str(obj["id"]), None if label is None else int(label), FeatureBundle(g, local)


def embedding_to_dict(rec: EmbeddingRecord) -> dict:
    return {"id": rec.id, "label": rec.label, "embedding": rec.embedding.tolist()}


def dumps_jsonl(rows: Iterable[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=False) + "\n" for r in rows)


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the target directory and rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def read_json(path) -> dict:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: line {exc.lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise InputError(f"{path}: expected a JSON object")
    return obj
