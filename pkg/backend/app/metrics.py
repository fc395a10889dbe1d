"""Reference-overlap metrics, rater agreement and rubric criterion tables."""

import logging
import math
import re
from collections import Counter
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from app.errors import MetricInputError
from app.jsonl import iter_jsonl
from app.models import RATING_SCALE

logger = logging.getLogger(__name__)

CRITERIA = [
    "instruction_alignment",
    "pedagogical_completeness",
    "linguistic_cultural_accuracy",
    "coherence_naturalness",
]
CRITERION_LABELS = {
    "instruction_alignment": "Instruction Alignment",
    "pedagogical_completeness": "Pedagogical Completeness",
    "linguistic_cultural_accuracy": "Linguistic & Cultural Accuracy",
    "coherence_naturalness": "Coherence & Naturalness",
}
AVG_COLUMN = "Avg"

_PUNCTS = set('!"#$%&\'()*+,-./:;<=>?@[\\]^_`{|}~')
_WS = re.compile(r"\s+")
_WORD = re.compile(r"\w+")

# ===========================================================================
# chrF++
# ===========================================================================


class ChrfConfig(BaseModel):
    char_order: int = Field(default=6, ge=1)
    word_order: int = Field(default=2, ge=1)
    beta: float = Field(default=2.0, gt=0)
    # precision_recall: average P and R over effective orders, then one F.
    # per_order_f: arithmetic mean of the per-order F scores.
    f_averaging: Literal["precision_recall", "per_order_f"] = "precision_recall"
    lowercase: bool = False


def _char_ngrams(text: str, n: int) -> Counter:
    text = _WS.sub("", text)
    return Counter(text[i:i + n] for i in range(len(text) - n + 1))


def _split_punct(text: str) -> List[str]:
    """Whitespace tokens with one leading or trailing punctuation mark detached."""
    tokens = []
    for w in text.split():
        if len(w) == 1:
            tokens.append(w)
        elif w[-1] in _PUNCTS:
            tokens.extend([w[:-1], w[-1]])
        elif w[0] in _PUNCTS:
            tokens.extend([w[0], w[1:]])
        else:
            tokens.append(w)
    return tokens


def _word_ngrams(tokens: List[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def chrf_statistics(hypothesis: str, reference: str, cfg: Optional[ChrfConfig] = None) -> np.ndarray:
    """(orders, 3) array of [hyp n-grams, ref n-grams, matches]; char orders first."""
    cfg = cfg or ChrfConfig()
    hyp, ref = hypothesis.strip(), reference.strip()
    if cfg.lowercase:
        hyp, ref = hyp.lower(), ref.lower()
    stats = np.zeros((cfg.char_order + cfg.word_order, 3), dtype=np.int64)
    for i, n in enumerate(range(1, cfg.char_order + 1)):
        h, r = _char_ngrams(hyp, n), _char_ngrams(ref, n)
        stats[i] = (sum(h.values()), sum(r.values()), sum((h & r).values()))
    hyp_words, ref_words = _split_punct(hyp), _split_punct(ref)
    for j, n in enumerate(range(1, cfg.word_order + 1)):
        h, r = _word_ngrams(hyp_words, n), _word_ngrams(ref_words, n)
        stats[cfg.char_order + j] = (sum(h.values()), sum(r.values()), sum((h & r).values()))
    return stats


def _f_beta(precision: float, recall: float, beta: float) -> float:
    b2 = beta ** 2
    denom = b2 * precision + recall
    return (1 + b2) * precision * recall / denom if denom > 0 else 0.0


def chrf_from_statistics(stats: np.ndarray, cfg: Optional[ChrfConfig] = None) -> float:
    cfg = cfg or ChrfConfig()
    effective = stats[(stats[:, 0] > 0) & (stats[:, 1] > 0)]
    if len(effective) == 0:
        return 0.0
    precision = effective[:, 2] / effective[:, 0]
    recall = effective[:, 2] / effective[:, 1]
    if cfg.f_averaging == "per_order_f":
        return 100.0 * float(np.mean([_f_beta(p, r, cfg.beta) for p, r in zip(precision, recall)]))
    return 100.0 * _f_beta(float(precision.mean()), float(recall.mean()), cfg.beta)


def chrf_pp(hypothesis: str, reference: str, cfg: Optional[ChrfConfig] = None) -> float:
    """Sentence-level chrF++ in [0, 100]."""
    return chrf_from_statistics(chrf_statistics(hypothesis, reference, cfg), cfg)


def chrf_corpus(hypotheses: Sequence[str], references: Sequence[str], cfg: Optional[ChrfConfig] = None) -> float:
    """Corpus-level chrF++: statistics are summed over segments before scoring."""
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    cfg = cfg or ChrfConfig()
    total = np.zeros((cfg.char_order + cfg.word_order, 3), dtype=np.int64)
    for h, r in zip(hypotheses, references):
        total += chrf_statistics(h, r, cfg)
    return chrf_from_statistics(total, cfg)


# ===========================================================================
# ROUGE-L
# ===========================================================================


class RougeScore(BaseModel):
    precision: float
    recall: float
    f1: float


def _tokens(text: str) -> List[str]:
    return _WORD.findall(text.lower())


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(hypothesis: str, reference: str) -> RougeScore:
    hyp, ref = _tokens(hypothesis), _tokens(reference)
    lcs = lcs_length(hyp, ref)
    p = lcs / len(hyp) if hyp else 0.0
    r = lcs / len(ref) if ref else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return RougeScore(precision=p, recall=r, f1=f1)


# ===========================================================================
# RATING SCALE
# ===========================================================================


def check_scale_value(value) -> int:
    """Coerce one rubric score onto the {1, 3, 5, 7} scale."""
    if isinstance(value, bool):
        raise ValueError(f"rating {value!r} is not numeric")
    try:
        as_float = float(value)
    except (TypeError, ValueError):
        raise ValueError(f"rating {value!r} is not numeric") from None
    if not as_float.is_integer() or int(as_float) not in RATING_SCALE:
        raise ValueError(f"rating {value!r} not in {RATING_SCALE}")
    return int(as_float)


def rating_to_percent(r):
    """Affine map {1, 3, 5, 7} -> {25, 50, 75, 100}; mean ratings in [1, 7] are accepted.

    Works on scalars, numpy arrays and pandas objects.
    """
    values = np.asarray(r, dtype=float)
    if not np.all(np.isfinite(values)) or np.any((values < RATING_SCALE[0]) | (values > RATING_SCALE[-1])):
        raise ValueError(f"rating outside [{RATING_SCALE[0]}, {RATING_SCALE[-1]}]: {r!r}")
    if values.ndim == 0:
        return 12.5 * (float(values) + 1)
    if isinstance(r, (pd.Series, pd.DataFrame)):
        return (r.astype(float) + 1) * 12.5
    return (values + 1) * 12.5


def percent_to_rating(p: float) -> float:
    if not (25.0 <= p <= 100.0):
        raise ValueError(f"percentage {p!r} outside [25, 100]")
    return p / 12.5 - 1


# ===========================================================================
# WEIGHTED KAPPA
# ===========================================================================


def weighted_kappa(
    ratings_a: Sequence,
    ratings_b: Sequence,
    weighting: Literal["linear", "quadratic"] = "quadratic",
    scale: Tuple[int, ...] = RATING_SCALE,
) -> float:
    if len(ratings_a) != len(ratings_b):
        raise ValueError(f"rating lists differ in length ({len(ratings_a)} vs {len(ratings_b)})")
    if not ratings_a:
        raise ValueError("rating lists are empty")
    if weighting not in ("linear", "quadratic"):
        raise ValueError(f"unknown weighting {weighting!r}")

    index = {v: i for i, v in enumerate(scale)}
    k = len(scale)
    ia = [index[check_scale_value(x)] for x in ratings_a]
    ib = [index[check_scale_value(x)] for x in ratings_b]

    observed = np.zeros((k, k), dtype=np.float64)
    np.add.at(observed, (ia, ib), 1.0)
    observed /= len(ia)
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0))

    i, j = np.indices((k, k))
    weights = np.abs(i - j) / (k - 1)
    if weighting == "quadratic":
        weights = weights ** 2

    denom = float((weights * expected).sum())
    if denom == 0.0:
        # both raters used one identical category throughout
        return 1.0
    return 1.0 - float((weights * observed).sum()) / denom


# ===========================================================================
# CRITERION TABLES
# ===========================================================================


class CriterionAverages(BaseModel):
    per_group: Dict[str, float]
    overall: float

    def to_series(self) -> pd.Series:
        s = pd.Series(self.per_group, dtype=float)
        s[AVG_COLUMN] = self.overall
        return s


class CriterionTable:
    """Group x criterion percentages, with the mean ratings they came from when known."""

    def __init__(
        self,
        percentages: pd.DataFrame,
        ratings: Optional[pd.DataFrame] = None,
        counts: Optional[pd.Series] = None,
        group_label: str = "language",
    ):
        percentages = percentages.astype(float)
        vals = percentages.to_numpy()
        if np.any((vals[~np.isnan(vals)] < 0) | (vals[~np.isnan(vals)] > 100)):
            raise MetricInputError("criterion percentages must lie in [0, 100]")
        if ratings is not None:
            r = ratings.astype(float).to_numpy()
            if np.any((r[~np.isnan(r)] < 1) | (r[~np.isnan(r)] > 7)):
                raise MetricInputError("criterion ratings must lie in [1, 7]")
        self.percentages = percentages
        self.ratings = ratings
        self.counts = counts
        self.group_label = group_label
        self.percentages.index.name = group_label

    @classmethod
    def from_ratings(cls, ratings: pd.DataFrame, counts: Optional[pd.Series] = None, group_label: str = "language") -> "CriterionTable":
        return cls(rating_to_percent(ratings), ratings=ratings, counts=counts, group_label=group_label)

    @classmethod
    def from_long(cls, frame: pd.DataFrame, value: str = "percent", group: str = "language") -> "CriterionTable":
        """Build from long rows ``(group, criterion, value)``."""
        wide = frame.pivot_table(index=group, columns="criterion", values=value, aggfunc="first")
        wide = wide.reindex(columns=[c for c in CRITERIA if c in wide.columns] + [c for c in wide.columns if c not in CRITERIA])
        wide.columns.name = None
        if value == "rating":
            return cls.from_ratings(wide, group_label=group)
        return cls(wide, group_label=group)

    @classmethod
    def from_dict(cls, data: dict) -> "CriterionTable":
        """Inverse of ``to_dict`` (values are as rounded there)."""
        try:
            percentages = pd.DataFrame.from_dict(data["percentages"], orient="index")
        except (KeyError, TypeError, ValueError) as e:
            raise MetricInputError(f"not a criterion table: {e}") from e
        ratings = pd.DataFrame.from_dict(data["ratings"], orient="index") if data.get("ratings") else None
        counts = pd.Series(data["counts"]) if data.get("counts") else None
        return cls(percentages, ratings=ratings, counts=counts, group_label=data.get("group_by", "language"))

    @property
    def groups(self) -> List[str]:
        return [str(g) for g in self.percentages.index]

    def to_frame(self, with_average: bool = True) -> pd.DataFrame:
        frame = self.percentages.copy()
        if with_average:
            averages = aggregate_criteria(self)
            frame[AVG_COLUMN] = [averages.per_group[g] for g in self.groups]
            overall = pd.DataFrame([{**frame.mean(numeric_only=True).to_dict(), AVG_COLUMN: averages.overall}], index=[AVG_COLUMN])
            frame = pd.concat([frame, overall])
            frame.index.name = self.group_label
        return frame

    def to_dict(self) -> dict:
        out = {
            "group_by": self.group_label,
            "percentages": {g: {c: _round(v) for c, v in row.items()} for g, row in self.percentages.to_dict(orient="index").items()},
        }
        if self.ratings is not None:
            out["ratings"] = {g: {c: _round(v, 4) for c, v in row.items()} for g, row in self.ratings.to_dict(orient="index").items()}
        if self.counts is not None:
            out["counts"] = {str(k): int(v) for k, v in self.counts.items()}
        averages = aggregate_criteria(self)
        out["averages"] = {g: _round(v) for g, v in averages.per_group.items()}
        out["overall"] = _round(averages.overall)
        return out

    def to_csv(self, path: str) -> None:
        self.to_frame().round(2).to_csv(path)

    def render(self, decimals: int = 1) -> str:
        frame = self.to_frame().rename(columns=CRITERION_LABELS)
        return frame.to_string(float_format=lambda v: f"{v:.{decimals}f}")


def _round(v, ndigits: int = 2):
    return None if v is None or (isinstance(v, float) and math.isnan(v)) else round(float(v), ndigits)


def aggregate_criteria(table: CriterionTable, criteria: Iterable[str] = CRITERIA) -> CriterionAverages:
    """Per-group mean of the criterion percentages; overall = mean over groups."""
    criteria = list(criteria)
    frame = table.percentages
    for group in frame.index:
        for criterion in criteria:
            if criterion not in frame.columns or pd.isna(frame.at[group, criterion]):
                raise MetricInputError(f"missing criterion '{criterion}' for {table.group_label} '{group}'")
    if frame.empty:
        raise MetricInputError("criterion table has no rows")
    per_group = frame[criteria].mean(axis=1)
    return CriterionAverages(
        per_group={str(g): float(v) for g, v in per_group.items()},
        overall=float(per_group.mean()),
    )


# ===========================================================================
# SCORE REPORTS
# ===========================================================================


def _read_by_id(path: str, kind: str) -> Dict[str, dict]:
    rows: Dict[str, dict] = {}
    for lineno, row in iter_jsonl(path):
        rid = row.get("id")
        if rid is None:
            raise MetricInputError(f"{path}:{lineno}: {kind} row without an 'id'")
        rows[str(rid)] = row
    return rows


def score_predictions(predictions_path: str, references_path: str, cfg: Optional[ChrfConfig] = None) -> pd.DataFrame:
    """One row per prediction: chrF++ and ROUGE-L against its reference."""
    predictions = _read_by_id(predictions_path, "prediction")
    references = _read_by_id(references_path, "reference")

    missing = [rid for rid in predictions if rid not in references]
    if missing:
        raise MetricInputError(f"no reference for prediction id '{missing[0]}'" + (f" (+{len(missing) - 1} more)" if len(missing) > 1 else ""))
    unscored = len(references) - len(predictions)
    if unscored > 0:
        logger.warning("%d references have no prediction and are not scored", unscored)

    rows = []
    for rid, pred in predictions.items():
        ref = references[rid]
        hyp = pred.get("prediction", "")
        rl = rouge_l(hyp, ref["reference"])
        rows.append({
            "id": rid,
            "language": ref.get("language") or pred.get("language"),
            "kind": ref.get("kind"),
            "chrf_pp": chrf_pp(hyp, ref["reference"], cfg),
            "rouge_l_precision": rl.precision,
            "rouge_l_recall": rl.recall,
            "rouge_l_f1": rl.f1,
        })
    return pd.DataFrame(rows)


def merge_scores(frame: pd.DataFrame, extra_paths: Iterable[str]) -> pd.DataFrame:
    """Join third-party per-item scores (``{id, <metric>: value}`` lines) by id."""
    for path in extra_paths:
        extra = pd.DataFrame([row for _, row in iter_jsonl(path)])
        if extra.empty:
            logger.warning("%s holds no scores", path)
            continue
        if "id" not in extra.columns:
            raise MetricInputError(f"{path}: score rows need an 'id'")
        extra["id"] = extra["id"].astype(str)
        clash = [c for c in extra.columns if c != "id" and c in frame.columns]
        if clash:
            raise MetricInputError(f"{path}: metric column(s) {clash} already present")
        frame = frame.merge(extra, on="id", how="left")
        unmatched = int(frame[[c for c in extra.columns if c != "id"]].isna().all(axis=1).sum())
        if unmatched:
            logger.warning("%s: %d scored items have no value in this file", path, unmatched)
    return frame


def metric_columns(frame: pd.DataFrame) -> List[str]:
    return [c for c in frame.columns if c not in ("id", "language", "kind") and pd.api.types.is_numeric_dtype(frame[c])]


def summarize_scores(frame: pd.DataFrame) -> pd.DataFrame:
    """Per-language metric means plus an ``Avg`` row (mean over languages)."""
    cols = metric_columns(frame)
    per_lang = frame.groupby("language")[cols].mean().sort_index()
    per_lang.loc[AVG_COLUMN] = per_lang.mean()
    return per_lang
