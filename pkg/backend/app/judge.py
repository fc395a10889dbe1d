"""Rubric-based scoring of tutor answers by a judge model."""

import json
import logging
import os
import re
from functools import lru_cache
from typing import Dict, Iterable, List, Literal, Optional

import pandas as pd
from pydantic import BaseModel, Field, ValidationError

from app.errors import MetricInputError, ResponseParseError
from app.jsonl import iter_jsonl
from app.metrics import CRITERIA, CriterionTable, check_scale_value
from app.models import BackendSpec, DialogueKind, GenerationRecord, GenerationRequest, JudgeVerdict, RecordStatus, TutorDialogue
from app.orchestrator import run_batch
from app.services import TextBackend
from app.templates import derive_seed
from app.transcript import format_transcript

logger = logging.getLogger(__name__)

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))  # backend/
RUBRIC_PATH = os.path.join(ROOT, "data", "rubric", "judge_prompt.txt")

# criterion id -> (rationale field, score field)
VERDICT_FIELDS: Dict[str, tuple] = {
    "instruction_alignment": ("instruction_following_rationale", "instruction_alignment_score"),
    "pedagogical_completeness": ("pedagogical_completeness_rationale", "pedagogical_completeness_score"),
    "linguistic_cultural_accuracy": ("linguistic_cultural_accuracy_rationale", "linguistic_cultural_accuracy_score"),
    "coherence_naturalness": ("coherence_and_naturalness_rationale", "coherence_and_naturalness_score"),
}
RATIONALE_WORD_LIMIT = 50
_PLACEHOLDER = re.compile(r"\{(question|candidate)\}")

GroupBy = Literal["language", "kind", "both"]
Flatten = Literal["final_turn", "dialogue"]

# ===========================================================================
# MODELS
# ===========================================================================


class JudgeItem(BaseModel):
    item_id: str
    question: str = Field(min_length=1)
    candidate: str = Field(min_length=1)
    language: str = ""
    kind: Optional[DialogueKind] = None


class JudgeResult(BaseModel):
    item_id: str
    language: str = ""
    kind: Optional[DialogueKind] = None
    status: RecordStatus
    verdict: Optional[JudgeVerdict] = None
    reason: Optional[str] = None
    attempts: int = 0


# ===========================================================================
# PROMPT
# ===========================================================================


@lru_cache(maxsize=1)
def load_rubric() -> str:
    with open(RUBRIC_PATH, "r", encoding="utf-8") as f:
        return f.read()


def build_judge_prompt(item: JudgeItem) -> str:
    values = {"question": item.question, "candidate": item.candidate}
    # single pass so substituted text is never rescanned
    return _PLACEHOLDER.sub(lambda m: values[m.group(1)], load_rubric())


# ===========================================================================
# VERDICT PARSING
# ===========================================================================


def extract_json_object(raw: str) -> Optional[dict]:
    """First balanced ``{...}`` in ``raw`` that decodes to a JSON object."""
    start = raw.find("{")
    while start != -1:
        depth, in_str, escaped = 0, False, False
        for i in range(start, len(raw)):
            ch = raw[i]
            if in_str:
                if escaped:
                    escaped = False
                elif ch == "\\":
                    escaped = True
                elif ch == '"':
                    in_str = False
                continue
            if ch == '"':
                in_str = True
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    try:
                        obj = json.loads(raw[start:i + 1])
                    except json.JSONDecodeError:
                        break
                    if isinstance(obj, dict):
                        return obj
                    break
        start = raw.find("{", start + 1)
    return None


def parse_verdict(raw: str) -> JudgeVerdict:
    obj = extract_json_object(raw or "")
    if obj is None:
        raise ResponseParseError("no JSON object", "judge output holds no JSON object")

    fields: Dict[str, object] = {}
    for criterion, (rationale_key, score_key) in VERDICT_FIELDS.items():
        for key in (rationale_key, score_key):
            if key not in obj:
                raise ResponseParseError("missing field", key)
        rationale = obj[rationale_key]
        if not isinstance(rationale, str) or not rationale.strip():
            raise ResponseParseError("missing field", f"{rationale_key} is empty")
        try:
            score = check_scale_value(obj[score_key])
        except ValueError as e:
            raise ResponseParseError("off-scale score", f"{score_key}: {e}") from e
        words = len(rationale.split())
        if words > RATIONALE_WORD_LIMIT:
            logger.warning("%s has %d words (guideline: under %d)", rationale_key, words, RATIONALE_WORD_LIMIT)
        fields[rationale_key] = rationale.strip()
        fields[score_key] = score

    try:
        return JudgeVerdict(**fields)
    except ValidationError as e:
        raise ResponseParseError("off-scale score", str(e.errors()[0]["msg"])) from e


def serialize_verdict(verdict: JudgeVerdict) -> str:
    """Canonical JSON form, in rubric field order."""
    obj = {}
    for rationale_key, score_key in VERDICT_FIELDS.values():
        obj[rationale_key] = getattr(verdict, rationale_key)
        obj[score_key] = getattr(verdict, score_key)
    return json.dumps(obj, ensure_ascii=False)


def verdict_scores(verdict: JudgeVerdict) -> Dict[str, int]:
    return {criterion: getattr(verdict, score_key) for criterion, (_, score_key) in VERDICT_FIELDS.items()}


def parse_for_judge(request: GenerationRequest, raw: str) -> JudgeVerdict:
    return parse_verdict(raw)


# ===========================================================================
# ITEMS
# ===========================================================================


def items_from_dialogues(dialogues: Iterable[TutorDialogue], flatten: Flatten = "final_turn") -> List[JudgeItem]:
    """final_turn: judge the last tutor turn given the preceding exchange.
    dialogue: judge the whole transcript against its opening learner turn.
    """
    items = []
    for d in dialogues:
        if flatten == "final_turn":
            question = format_transcript(d.turns[:-1])
            candidate = d.turns[-1].content
        elif flatten == "dialogue":
            question = d.turns[0].content
            candidate = format_transcript(d.turns)
        else:
            raise ValueError(f"unknown flatten mode {flatten!r}")
        items.append(JudgeItem(item_id=d.dialogue_id, question=question, candidate=candidate, language=d.language, kind=d.kind))
    return items


def items_from_predictions(test_items_path: str, predictions_path: str) -> List[JudgeItem]:
    """Pair evaluation questions with model predictions by id."""
    questions = {str(row["id"]): row for _, row in iter_jsonl(test_items_path)}
    items = []
    for lineno, row in iter_jsonl(predictions_path):
        rid = str(row.get("id"))
        if rid not in questions:
            raise MetricInputError(f"{predictions_path}:{lineno}: no test item with id '{rid}'")
        q = questions[rid]
        if not str(row.get("prediction", "")).strip():
            raise MetricInputError(f"{predictions_path}:{lineno}: empty prediction for '{rid}'")
        items.append(JudgeItem(
            item_id=rid,
            question=q["question"],
            candidate=row.get("prediction", ""),
            language=q.get("language", ""),
            kind=q.get("kind"),
        ))
    return items


# ===========================================================================
# BATCH
# ===========================================================================


def judge_requests(items: List[JudgeItem], seed: int = 0) -> List[GenerationRequest]:
    return [
        GenerationRequest(
            request_id=f"judge-{item.item_id}",
            entry_id=item.item_id,
            language=item.language,
            task="judge",
            kind=item.kind,
            prompt_text=build_judge_prompt(item),
            target_role="judge",
            seed=derive_seed(seed, "judge", item.item_id),
            response_format="verdict",
        )
        for item in items
    ]


def _to_result(item: JudgeItem, record: GenerationRecord) -> JudgeResult:
    return JudgeResult(
        item_id=item.item_id,
        language=item.language,
        kind=item.kind,
        status=record.status,
        verdict=record.parsed if isinstance(record.parsed, JudgeVerdict) else None,
        reason=record.reason,
        attempts=record.attempts,
    )


def judge_batch(
    items: List[JudgeItem],
    spec: BackendSpec,
    checkpoint_path: str,
    backend: Optional[TextBackend] = None,
    progress: bool = True,
    seed: int = 0,
) -> List[JudgeResult]:
    """One result per item, failures included, in input order."""
    records = run_batch(judge_requests(items, seed), spec, checkpoint_path, backend=backend, parser=parse_for_judge, progress=progress, seed=seed)
    results = [_to_result(item, rec) for item, rec in zip(items, records)]
    failed = sum(1 for r in results if r.status != "ok")
    logger.info("Judged %d items (%d failed)", len(results), failed)
    return results


def result_row(result: JudgeResult) -> dict:
    row = {
        "item_id": result.item_id,
        "language": result.language,
        "kind": result.kind.value if result.kind else None,
        "status": result.status,
        "attempts": result.attempts,
    }
    if result.verdict is not None:
        row["verdict"] = json.loads(serialize_verdict(result.verdict))
    else:
        row["reason"] = result.reason
    return row


def read_results(path: str) -> List[JudgeResult]:
    out = []
    for _, row in iter_jsonl(path):
        verdict = row.pop("verdict", None)
        out.append(JudgeResult(**row, verdict=JudgeVerdict(**verdict) if verdict else None))
    return out


# ===========================================================================
# AGGREGATION
# ===========================================================================


def _group_key(result: JudgeResult, group_by: GroupBy) -> str:
    kind = result.kind.value if result.kind else "-"
    if group_by == "language":
        return result.language or "-"
    if group_by == "kind":
        return kind
    return f"{result.language or '-'}/{kind}"


def aggregate_verdicts(results: Iterable, group_by: GroupBy = "language") -> CriterionTable:
    """Mean rating per criterion per group, converted to percentages.

    Accepts ``JudgeResult`` objects; groups whose items all failed are left out.
    """
    if group_by not in ("language", "kind", "both"):
        raise ValueError(f"unknown grouping {group_by!r}")
    rows, seen = [], []
    for r in results:
        key = _group_key(r, group_by)
        if key not in seen:
            seen.append(key)
        if r.verdict is not None:
            rows.append({"group": key, **verdict_scores(r.verdict)})

    frame = pd.DataFrame(rows, columns=["group", *CRITERIA])
    for key in seen:
        if key not in set(frame["group"]):
            logger.warning("No valid verdicts for %s '%s'; group excluded", group_by, key)
    if frame.empty:
        raise MetricInputError("no valid verdicts to aggregate")

    grouped = frame.groupby("group", sort=True)
    ratings = grouped[CRITERIA].mean()
    counts = grouped.size()
    label = "language/kind" if group_by == "both" else group_by
    return CriterionTable.from_ratings(ratings, counts=counts, group_label=label)
