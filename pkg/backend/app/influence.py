"""Gradient dot-product influence of training samples on a validation set.

Gradients are exported by the training stack; this module only reads them.

Binary gradient file::

    {"dimension": d, "count": n, "gradient_source": "...", "precision": "float32", "split": "train"}\\n
    n rows of: <uint32 LE id length> <id utf-8 bytes> <d x float32 LE>

JSON-lines fallback: one ``{"sample_id", "split", "vector"}`` object per line.
"""

import json
import logging
import math
import os
import struct
from typing import Iterable, List, Literal, Optional, Sequence, Set

import numpy as np
from pydantic import BaseModel, Field, field_validator

from app.errors import DataError, InfluenceInputError
from app.jsonl import iter_jsonl, write_jsonl

logger = logging.getLogger(__name__)

Split = Literal["train", "validation"]
_ID_LEN = struct.Struct("<I")
_FLOAT = np.dtype("<f4")

# ===========================================================================
# MODELS
# ===========================================================================


class GradientRecord(BaseModel):
    sample_id: str = Field(min_length=1)
    split: Split = "train"
    vector: List[float] = Field(min_length=1)

    @field_validator("vector")
    @classmethod
    def _finite(cls, v: List[float]) -> List[float]:
        if not np.all(np.isfinite(v)):
            raise ValueError("gradient vector has non-finite entries")
        return v


class GradientSet:
    """Sample ids plus an (n, d) matrix of gradients sharing one dimension."""

    def __init__(self, ids: Sequence[str], matrix, split: Split = "train", gradient_source: str = ""):
        matrix = np.asarray(matrix)
        if matrix.ndim != 2:
            raise InfluenceInputError("gradient matrix must be two-dimensional")
        if len(ids) != matrix.shape[0]:
            raise InfluenceInputError(f"{len(ids)} ids for {matrix.shape[0]} gradient rows")
        if len(set(ids)) != len(ids):
            raise InfluenceInputError("duplicate sample ids in gradient set")
        if not np.all(np.isfinite(matrix)):
            bad = ids[int(np.argwhere(~np.isfinite(matrix))[0][0])]
            raise InfluenceInputError(f"non-finite gradient entries for sample '{bad}'")
        self.ids = list(ids)
        self.matrix = matrix
        self.split = split
        self.gradient_source = gradient_source

    @property
    def dimension(self) -> int:
        return int(self.matrix.shape[1])

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_records(cls, records: Iterable[GradientRecord], split: Optional[Split] = None, gradient_source: str = "") -> "GradientSet":
        records = [r for r in records if split is None or r.split == split]
        if not records:
            return cls([], np.zeros((0, 0), dtype=_FLOAT), split=split or "train", gradient_source=gradient_source)
        dims = {len(r.vector) for r in records}
        if len(dims) > 1:
            raise InfluenceInputError(f"gradient vectors have mixed dimensions {sorted(dims)}")
        return cls(
            [r.sample_id for r in records],
            np.array([r.vector for r in records], dtype=np.float64),
            split=split or records[0].split,
            gradient_source=gradient_source,
        )

    def records(self) -> List[GradientRecord]:
        return [GradientRecord(sample_id=i, split=self.split, vector=row.tolist()) for i, row in zip(self.ids, self.matrix)]


class InfluenceScore(BaseModel):
    sample_id: str
    score: float
    rank: int
    keep: bool = True


class ScoreSummary(BaseModel):
    min: float
    max: float
    mean: float
    median: float


class InfluenceReport(BaseModel):
    scores: List[InfluenceScore]
    validation_count: int
    dimension: int
    gradient_source: str = ""
    retention_fraction: Optional[float] = None
    harmful_count: int = 0
    summary: Optional[ScoreSummary] = None

    def keep_count(self) -> int:
        return sum(1 for s in self.scores if s.keep)


# ===========================================================================
# SCORING
# ===========================================================================


def _as_vector(grad) -> np.ndarray:
    values = grad.vector if isinstance(grad, GradientRecord) else grad
    vec = np.asarray(values, dtype=np.float64)
    if vec.ndim != 1:
        raise InfluenceInputError("gradient must be a vector")
    if not np.all(np.isfinite(vec)):
        raise InfluenceInputError("gradient vector has non-finite entries")
    return vec


def influence(train_grad, val_grad) -> float:
    """Inner product of two gradients; positive means the training sample helps."""
    t, v = _as_vector(train_grad), _as_vector(val_grad)
    if t.shape != v.shape:
        raise InfluenceInputError(f"dimension mismatch: {t.shape[0]} vs {v.shape[0]}")
    return float(np.dot(t, v))


def _rank(ids: List[str], scores: np.ndarray) -> List[int]:
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    ranks = [0] * len(ids)
    for r, i in enumerate(order, start=1):
        ranks[i] = r
    return ranks


def mean_influence(train: GradientSet, validation: GradientSet, chunk_size: int = 4096) -> InfluenceReport:
    """Per-train mean influence over the validation set.

    mean_j <t, v_j> = <t, sum_j v_j> / |V|, so the validation set is streamed
    once into a float64 sum and each training row costs one dot product.
    """
    if len(validation) == 0:
        raise InfluenceInputError("validation gradient set is empty")
    if len(train) and train.dimension != validation.dimension:
        raise InfluenceInputError(f"dimension mismatch: train {train.dimension} vs validation {validation.dimension}")

    v_sum = np.zeros(validation.dimension, dtype=np.float64)
    for start in range(0, len(validation), chunk_size):
        v_sum += validation.matrix[start:start + chunk_size].astype(np.float64).sum(axis=0)

    scores = np.empty(len(train), dtype=np.float64)
    for start in range(0, len(train), chunk_size):
        block = train.matrix[start:start + chunk_size].astype(np.float64)
        scores[start:start + len(block)] = block @ v_sum
    scores /= len(validation)

    ranks = _rank(train.ids, scores)
    harmful = int((scores < 0).sum())
    summary = None
    if len(scores):
        summary = ScoreSummary(
            min=float(scores.min()),
            max=float(scores.max()),
            mean=float(scores.mean()),
            median=float(np.median(scores)),
        )
    if harmful:
        logger.info("%d of %d training samples have negative mean influence", harmful, len(scores))
    return InfluenceReport(
        scores=[InfluenceScore(sample_id=i, score=float(s), rank=r) for i, s, r in zip(train.ids, scores, ranks)],
        validation_count=len(validation),
        dimension=validation.dimension,
        gradient_source=train.gradient_source or validation.gradient_source,
        harmful_count=harmful,
        summary=summary,
    )


def keep_count(n: int, fraction: float) -> int:
    if not (0.0 < fraction <= 1.0):
        raise ValueError(f"retention fraction must be in (0, 1], got {fraction}")
    # round first so 0.7 * 10 does not become 8
    return math.ceil(round(fraction * n, 9))


def filter_top(report: InfluenceReport, fraction: float) -> List[str]:
    """Ids of the ceil(fraction * n) most helpful samples, best first.

    Marks ``keep`` on the report's scores as a side effect.
    """
    k = keep_count(len(report.scores), fraction)
    ranked = sorted(report.scores, key=lambda s: (-s.score, s.sample_id))
    kept = {s.sample_id for s in ranked[:k]}
    for s in report.scores:
        s.keep = s.sample_id in kept
    report.retention_fraction = fraction
    return [s.sample_id for s in ranked[:k]]


# ===========================================================================
# FILES
# ===========================================================================


def write_gradients_binary(path: str, grads: GradientSet) -> None:
    header = {
        "dimension": grads.dimension,
        "count": len(grads),
        "gradient_source": grads.gradient_source,
        "precision": "float32",
        "split": grads.split,
    }
    try:
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "wb") as f:
            f.write((json.dumps(header) + "\n").encode("utf-8"))
            for sample_id, row in zip(grads.ids, grads.matrix):
                raw_id = sample_id.encode("utf-8")
                f.write(_ID_LEN.pack(len(raw_id)))
                f.write(raw_id)
                f.write(np.asarray(row, dtype=_FLOAT).tobytes())
    except OSError as e:
        raise DataError(f"cannot write {path}: {e}") from e


def write_gradients_jsonl(path: str, records: Iterable[GradientRecord]) -> int:
    return write_jsonl(path, (r.model_dump() for r in records))


def _read_exact(f, n: int, path: str, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise InfluenceInputError(f"{path}: truncated gradient file while reading {what}")
    return data


def _read_binary(path: str, header: dict, f) -> GradientSet:
    if header.get("precision") != "float32":
        raise InfluenceInputError(f"{path}: unsupported precision {header.get('precision')!r}")
    try:
        d, n = int(header["dimension"]), int(header["count"])
    except (KeyError, TypeError, ValueError) as e:
        raise InfluenceInputError(f"{path}: header needs integer 'dimension' and 'count'") from e
    ids, rows = [], np.empty((n, d), dtype=_FLOAT)
    for i in range(n):
        (length,) = _ID_LEN.unpack(_read_exact(f, _ID_LEN.size, path, f"row {i + 1} id length"))
        ids.append(_read_exact(f, length, path, f"row {i + 1} id").decode("utf-8"))
        rows[i] = np.frombuffer(_read_exact(f, 4 * d, path, f"row {i + 1} vector"), dtype=_FLOAT)
    if f.read(1):
        raise InfluenceInputError(f"{path}: {n} rows declared but more data follows")
    return GradientSet(ids, rows, split=header.get("split", "train"), gradient_source=header.get("gradient_source", ""))


def read_gradients(path: str, split: Optional[Split] = None) -> GradientSet:
    """Read either gradient format; ``split`` filters JSON-lines records."""
    try:
        with open(path, "rb") as f:
            first = f.readline()
            try:
                head = json.loads(first.decode("utf-8")) if first.strip() else {}
            except (UnicodeDecodeError, json.JSONDecodeError) as e:
                raise InfluenceInputError(f"{path}: first line is not a JSON header or record") from e
            if "dimension" in head and "sample_id" not in head:
                grads = _read_binary(path, head, f)
                if split and grads.split != split:
                    raise InfluenceInputError(f"{path}: holds {grads.split} gradients, not {split}")
                return grads
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e

    records = []
    for lineno, row in iter_jsonl(path):
        try:
            records.append(GradientRecord(**row))
        except ValueError as e:
            raise InfluenceInputError(f"{path}:{lineno}: invalid gradient record ({e})") from e
    return GradientSet.from_records(records, split=split)


def write_keep_list(path: str, sample_ids: Iterable[str]) -> int:
    ids = list(sample_ids)
    try:
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            f.writelines(f"{i}\n" for i in ids)
    except OSError as e:
        raise DataError(f"cannot write {path}: {e}") from e
    return len(ids)


def read_keep_list(path: str) -> Set[str]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return {line.strip() for line in f if line.strip()}
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
