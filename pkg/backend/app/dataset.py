"""SFT / DPO dataset assembly, splitting and JSON-lines interchange."""

import json
import logging
import os
from collections import Counter
from functools import lru_cache
from typing import Dict, Iterable, List, Literal, Optional, Set, Tuple

import numpy as np
from jsonschema import Draft202012Validator
from pydantic import BaseModel, Field, ValidationError

from app.errors import DataError, SplitError
from app.jsonl import iter_jsonl, write_jsonl
from app.models import (
    GenerationRecord,
    PairProvenance,
    PreferencePair,
    ResponseText,
    Role,
    SplitSpec,
    Turn,
    TutorDialogue,
)
from app.templates import derive_seed
from app.transcript import format_transcript

logger = logging.getLogger(__name__)

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))  # backend/
SCHEMA_DIR = os.path.join(ROOT, "data", "schemas")

DatasetFormat = Literal["sft-chat", "dpo-pairs"]
SCHEMA_FILES = {"sft-chat": "sft_chat.schema.json", "dpo-pairs": "dpo_pair.schema.json"}
CHAT_ROLES = {Role.learner: "user", Role.tutor: "assistant"}

# ===========================================================================
# MODELS
# ===========================================================================


class SftDataset(BaseModel):
    train: List[TutorDialogue] = Field(default_factory=list)
    test: List[TutorDialogue] = Field(default_factory=list)
    skipped: int = 0
    dropped_by_keep_list: int = 0


class UnmatchedRecord(BaseModel):
    request_id: str
    lineage_id: str = ""
    side: Literal["chosen", "rejected"]
    reason: str


class QuarantinedPair(BaseModel):
    lineage_id: str
    reason: str
    chosen_request_id: str
    rejected_request_id: str


class DpoDataset(BaseModel):
    pairs: List[PreferencePair] = Field(default_factory=list)
    unmatched: List[UnmatchedRecord] = Field(default_factory=list)
    quarantined: List[QuarantinedPair] = Field(default_factory=list)


# ===========================================================================
# SFT
# ===========================================================================


def _ok_dialogues(records: Iterable[GenerationRecord]) -> Tuple[List[TutorDialogue], int]:
    out, skipped = [], 0
    for rec in records:
        if rec.status != "ok" or not isinstance(rec.parsed, TutorDialogue):
            skipped += 1
            continue
        d = rec.parsed
        if rec.request is not None and d.language and d.language != rec.request.language:
            logger.warning("%s: dialogue language %s does not match its entry (%s)", rec.request_id, d.language, rec.request.language)
            skipped += 1
            continue
        out.append(d)
    return out, skipped


def split_language(dialogues: List[TutorDialogue], language: str, test_size: int, seed: int) -> Tuple[List[TutorDialogue], List[TutorDialogue]]:
    """Group-aware split: every dialogue from one entry lands on the same side."""
    if test_size > len(dialogues):
        raise SplitError(language, test_size, len(dialogues))

    groups: Dict[str, List[TutorDialogue]] = {}
    for d in sorted(dialogues, key=lambda d: d.dialogue_id):
        groups.setdefault(d.entry_id or d.dialogue_id, []).append(d)
    keys = sorted(groups)
    rng = np.random.default_rng(derive_seed(seed, "split", language))
    order = [keys[int(i)] for i in rng.permutation(len(keys))]

    test_keys: Set[str] = set()
    n_test = 0
    for key in order:
        if n_test == test_size:
            break
        if n_test + len(groups[key]) <= test_size:
            test_keys.add(key)
            n_test += len(groups[key])
    if n_test < test_size:
        logger.warning("%s: test split holds %d of %d requested dialogues (entry groups do not fit exactly)", language, n_test, test_size)

    train = [d for k in keys if k not in test_keys for d in groups[k]]
    test = [d for k in keys if k in test_keys for d in groups[k]]
    return train, test


def build_sft(
    records: Iterable[GenerationRecord],
    split: SplitSpec,
    system_preamble: Optional[str] = None,
    keep_list: Optional[Set[str]] = None,
) -> SftDataset:
    """Split per language; a keep-list filters the train side only, after the split."""
    dialogues, skipped = _ok_dialogues(records)
    if skipped:
        logger.warning("Skipped %d records that are not usable dialogues", skipped)
    if system_preamble:
        dialogues = [d.model_copy(update={"system_preamble": system_preamble}) for d in dialogues]

    by_lang: Dict[str, List[TutorDialogue]] = {}
    for d in dialogues:
        by_lang.setdefault(d.language, []).append(d)

    out = SftDataset(skipped=skipped)
    for lang in sorted(by_lang):
        rows = by_lang[lang]
        train, test = split_language(rows, lang, split.size_for(lang, len(rows)), split.seed)
        out.train.extend(train)
        out.test.extend(test)
    if keep_list is not None:
        out.train, out.dropped_by_keep_list = apply_keep_list(out.train, keep_list)
        logger.info("Keep-list dropped %d training dialogues", out.dropped_by_keep_list)
    logger.info("SFT: %d train / %d test dialogues", len(out.train), len(out.test))
    return out


def apply_keep_list(train: List[TutorDialogue], keep: Set[str]) -> Tuple[List[TutorDialogue], int]:
    kept = [d for d in train if d.dialogue_id in keep]
    return kept, len(train) - len(kept)


def test_items(test: List[TutorDialogue]) -> List[dict]:
    """Evaluation view: context up to the last learner turn, final tutor turn as reference."""
    rows = []
    for d in test:
        rows.append({
            "id": d.dialogue_id,
            "language": d.language,
            "kind": d.kind.value if d.kind else None,
            "question": format_transcript(d.turns[:-1]),
            "reference": d.turns[-1].content,
        })
    return rows


# ===========================================================================
# DPO
# ===========================================================================


def _index(records: Iterable[GenerationRecord], side: str, unmatched: List[UnmatchedRecord]) -> Dict[str, GenerationRecord]:
    out: Dict[str, GenerationRecord] = {}
    for rec in records:
        lineage = rec.request.lineage_id if rec.request else ""
        if not lineage:
            unmatched.append(UnmatchedRecord(request_id=rec.request_id, side=side, reason="missing lineage"))
        elif rec.status != "ok" or not isinstance(rec.parsed, ResponseText):
            unmatched.append(UnmatchedRecord(request_id=rec.request_id, lineage_id=lineage, side=side, reason=f"generation {rec.status}"))
        else:
            out[lineage] = rec
    return out


def build_dpo(chosen_records: Iterable[GenerationRecord], rejected_records: Iterable[GenerationRecord]) -> DpoDataset:
    out = DpoDataset()
    chosen = _index(chosen_records, "chosen", out.unmatched)
    rejected = _index(rejected_records, "rejected", out.unmatched)

    for lineage in sorted(set(chosen) - set(rejected)):
        out.unmatched.append(UnmatchedRecord(request_id=chosen[lineage].request_id, lineage_id=lineage, side="chosen", reason="no rejected twin"))
    for lineage in sorted(set(rejected) - set(chosen)):
        out.unmatched.append(UnmatchedRecord(request_id=rejected[lineage].request_id, lineage_id=lineage, side="rejected", reason="no chosen twin"))

    for lineage in sorted(set(chosen) & set(rejected)):
        c, r = chosen[lineage], rejected[lineage]
        creq, rreq = c.request, r.request
        quarantine = None
        if creq.learner_query != rreq.learner_query:
            quarantine = "chosen and rejected answer different queries"
        elif c.parsed.text.strip() == r.parsed.text.strip():
            quarantine = "identical chosen and rejected"
        if quarantine:
            out.quarantined.append(QuarantinedPair(lineage_id=lineage, reason=quarantine, chosen_request_id=c.request_id, rejected_request_id=r.request_id))
            continue
        out.pairs.append(PreferencePair(
            pair_id=lineage,
            language=creq.language,
            prompt=creq.learner_query or creq.prompt_text,
            chosen=c.parsed.text,
            rejected=r.parsed.text,
            combo=creq.combo,
            negative_type=creq.negative_type,
            provenance=PairProvenance(
                entry_id=creq.entry_id,
                lineage_id=lineage,
                chosen_backend=c.backend,
                rejected_backend=r.backend,
            ),
        ))

    if out.unmatched:
        logger.warning("DPO: %d records without a usable twin", len(out.unmatched))
    if out.quarantined:
        logger.warning("DPO: %d pairs quarantined", len(out.quarantined))
    logger.info("DPO: %d preference pairs", len(out.pairs))
    return out


# ===========================================================================
# INTERCHANGE FORMATS
# ===========================================================================


def dialogue_to_row(d: TutorDialogue) -> dict:
    messages = []
    if d.system_preamble:
        messages.append({"role": "system", "content": d.system_preamble})
    messages.extend({"role": CHAT_ROLES[t.role], "content": t.content} for t in d.turns)
    return {
        "messages": messages,
        "meta": {"dialogue_id": d.dialogue_id, "language": d.language, "kind": d.kind.value if d.kind else None, "entry_id": d.entry_id},
    }


def row_to_dialogue(row: dict) -> TutorDialogue:
    roles = {v: k for k, v in CHAT_ROLES.items()}
    system = None
    turns = []
    for m in row["messages"]:
        if m["role"] == "system":
            system = m["content"]
        else:
            turns.append(Turn(role=roles[m["role"]], content=m["content"]))
    meta = row.get("meta", {})
    return TutorDialogue(turns=turns, system_preamble=system, **meta)


def pair_to_row(p: PreferencePair) -> dict:
    return {
        "prompt": p.prompt,
        "chosen": p.chosen,
        "rejected": p.rejected,
        "meta": {
            "pair_id": p.pair_id,
            "language": p.language,
            "combo": p.combo.value,
            "negative_type": p.negative_type.value if p.negative_type else None,
            "provenance": p.provenance.model_dump(),
        },
    }


def row_to_pair(row: dict) -> PreferencePair:
    meta = row["meta"]
    return PreferencePair(prompt=row["prompt"], chosen=row["chosen"], rejected=row["rejected"], **meta)


def emit(dataset: list, fmt: DatasetFormat, path: str, split_by_language: bool = False) -> List[str]:
    """Write one JSON object per example. Returns the written paths."""
    to_row = dialogue_to_row if fmt == "sft-chat" else pair_to_row
    if not split_by_language:
        write_jsonl(path, (to_row(x) for x in dataset))
        return [path]

    stem, ext = os.path.splitext(path)
    by_lang: Dict[str, list] = {}
    for x in dataset:
        by_lang.setdefault(x.language, []).append(x)
    paths = []
    for lang in sorted(by_lang):
        p = f"{stem}.{lang}{ext or '.jsonl'}"
        write_jsonl(p, (to_row(x) for x in by_lang[lang]))
        paths.append(p)
    return paths


def read_dataset(path: str, fmt: DatasetFormat) -> list:
    from_row = row_to_dialogue if fmt == "sft-chat" else row_to_pair
    out = []
    for lineno, row in iter_jsonl(path):
        try:
            out.append(from_row(row))
        except (ValidationError, KeyError, TypeError) as e:
            raise DataError(f"{path}:{lineno}: malformed {fmt} row ({e})") from e
    return out


@lru_cache(maxsize=None)
def _validator(fmt: str) -> Draft202012Validator:
    with open(os.path.join(SCHEMA_DIR, SCHEMA_FILES[fmt]), "r", encoding="utf-8") as f:
        return Draft202012Validator(json.load(f))


def validate_file(path: str, fmt: DatasetFormat) -> List[Tuple[int, str]]:
    validator = _validator(fmt)
    violations = []
    for lineno, row in iter_jsonl(path):
        for err in validator.iter_errors(row):
            loc = "/".join(str(p) for p in err.absolute_path) or "<root>"
            violations.append((lineno, f"{loc}: {err.message}"))
    return violations


# ===========================================================================
# STATS
# ===========================================================================


def dataset_stats(sft: Optional[SftDataset] = None, dpo: Optional[DpoDataset] = None) -> dict:
    stats: dict = {"sft": {}, "dpo": {}, "per_language": {}}
    lang_rows: Dict[str, Counter] = {}

    if sft is not None:
        for split_name, rows in (("train", sft.train), ("test", sft.test)):
            counts = Counter((d.language, d.kind.value if d.kind else "?") for d in rows)
            stats["sft"][split_name] = {f"{lang}/{kind}": n for (lang, kind), n in sorted(counts.items())}
            for d in rows:
                lang_rows.setdefault(d.language, Counter())[f"sft_{split_name}"] += 1
        stats["sft"]["skipped"] = sft.skipped
        stats["sft"]["dropped_by_keep_list"] = sft.dropped_by_keep_list

    if dpo is not None:
        counts = Counter((p.language, p.combo.value, p.negative_type.value if p.negative_type else "-") for p in dpo.pairs)
        stats["dpo"]["pairs"] = {f"{lang}/{combo}/{neg}": n for (lang, combo, neg), n in sorted(counts.items())}
        stats["dpo"]["unmatched"] = len(dpo.unmatched)
        stats["dpo"]["quarantined"] = len(dpo.quarantined)
        for p in dpo.pairs:
            lang_rows.setdefault(p.language, Counter())["dpo_pairs"] += 1

    stats["per_language"] = {lang: dict(c) for lang, c in sorted(lang_rows.items())}
    return stats
