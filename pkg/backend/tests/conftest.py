import os

# no rotating log file during tests
os.environ["DICTUTOR_LOG_FILE"] = ""

from datetime import datetime, timezone
from typing import Dict, List, Optional, Tuple

import numpy as np
import pytest

from app.models import (
    BackendSpec,
    DialogueKind,
    GenerationRecord,
    GenerationRequest,
    MockOptions,
    NegativeQueryType,
    PairQualityCombo,
    ResponseText,
    RetryPolicy,
    Role,
    Turn,
    TutorDialogue,
)

SYLLABLES = ["ka", "lo", "mi", "su", "ne", "ba", "to", "ri", "wa", "de", "ye", "zu", "fa", "go"]
GLOSSES = ["water", "house", "child", "market", "rain", "friend", "road", "bread", "song", "tree", "morning", "river"]

# ===========================================================================
# DICTIONARY FIXTURES
# ===========================================================================

TEN_LINE_SOURCE = "\n".join([
    "abba — father",
    "selam — peace; hello",
    "bet (noun) — house",
    "this line has no separator",
    "wuha – water",
    "dabo - bread",
    "———",
    "lij (noun) — child; kid",
    "gebeya — market",
    "zinab — rain",
])
# lines 4 and 7 are malformed
TEN_LINE_LEDGER = {"entries": 8, "rejects": 2, "reject_lines": [4, 7]}


def unique_headwords(n: int, seed: int = 0) -> List[str]:
    rng = np.random.default_rng(seed)
    words: List[str] = []
    seen = set()
    while len(words) < n:
        k = int(rng.integers(2, 4))
        w = "".join(SYLLABLES[int(i)] for i in rng.integers(len(SYLLABLES), size=k))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def line_source_with_duplicates(unique: int, duplicates: int, language: str = "amh", seed: int = 0) -> Tuple[str, Dict[str, int]]:
    """Line-profile text with planted duplicates (case and spacing vary)."""
    rng = np.random.default_rng(seed)
    words = unique_headwords(unique, seed)
    lines = [f"{w} — {GLOSSES[i % len(GLOSSES)]}" for i, w in enumerate(words)]
    for _ in range(duplicates):
        i = int(rng.integers(unique))
        lines.insert(int(rng.integers(i + 1, len(lines) + 1)), f"  {words[i].upper()}   —   {GLOSSES[i % len(GLOSSES)].title()} ")
    return "\n".join(lines) + "\n", {"lines": unique + duplicates, "unique": unique, "duplicates": duplicates}


def e2e_dictionary(per_language: Dict[str, int], seed: int = 3) -> Dict[str, str]:
    """language -> line-profile text."""
    out = {}
    for offset, (lang, n) in enumerate(sorted(per_language.items())):
        words = unique_headwords(n, seed + offset)
        out[lang] = "\n".join(f"{w} (noun) — {GLOSSES[i % len(GLOSSES)]}; {GLOSSES[(i + 5) % len(GLOSSES)]}" for i, w in enumerate(words)) + "\n"
    return out


# ===========================================================================
# TRANSCRIPTS
# ===========================================================================


def L(text: str = "What does it mean?") -> str:
    return f"[LEARNER]: {text}"


def T(text: str = "It means water. Try a sentence.") -> str:
    return f"[TUTOR]: {text}"


def transcript(*lines: str) -> str:
    return "\n".join(lines)


GOOD_TRANSCRIPT = transcript(L("What does wuha mean?"), T("Wuha means water."), L("Use it in a sentence?"), T("Wuha ifeligalehu: I want water."), L("Is it formal?"), T("It is neutral."))

ADVERSARIAL_TRANSCRIPTS: List[Tuple[str, str]] = [
    (transcript(L(), T(), T(), L(), T(), L(), T()), "alternation"),
    (transcript(T(), L(), T(), L(), T(), L(), T()), "alternation"),
    (transcript(L(), L(), T(), L(), T(), L(), T()), "alternation"),
    (transcript(L(), T(), L(), T()), "min_turns"),
    (transcript(L(), T()), "min_turns"),
    (transcript(L(), T(), L(), T(), L(), T(), L()), "structure"),
    ("", "structure"),
    ("Sure! Here is a lovely dialogue about water.", "structure"),
    ("Here you go:\n" + GOOD_TRANSCRIPT, "structure"),
    (transcript(L(), "[TUTOR]:", L(), T(), L(), T()), "empty_turn"),
    (transcript("[LEARNER]:", T(), L(), T(), L(), T()), "empty_turn"),
    (transcript(L(), T(), L(), "[TUTOR]:    ", L(), T()), "empty_turn"),
    (transcript(L(), T(), L(), T(), L()), "structure"),
    (transcript("[STUDENT]: hi", "[USER]: hello again", T(), L(), T(), L(), T()), "alternation"),
    (transcript(L(), "**Tutor:** one", "**Tutor:** two", L(), T(), L(), T()), "alternation"),
    (transcript(T(), T(), T()), "alternation"),
    (transcript(L(), L(), L()), "alternation"),
    (transcript(L(), T(), L(), T(), "and some trailing prose", "over two lines"), "min_turns"),
    (transcript(L("a " * 200), T("b " * 200), L("c"), T("d")), "min_turns"),
    (transcript(T("Welcome!"), L(), T(), L(), T(), L(), T()), "alternation"),
    (transcript(L(), T(), L(), T(), T(), L(), T()), "alternation"),
    (transcript(L(), T(), L(), L(), T(), L(), T()), "alternation"),
    (transcript(L(), T(), L(), T(), L(), T(), L(), L()), "alternation"),
    (transcript(L(), T(), L(), T(), L(), T(), L(), T(), T()), "alternation"),
    (transcript(L(), T(), L(), "[TUTOR]:", L(), T(), L(), T()), "empty_turn"),
    ("LEARNER hello\nTUTOR hi\nLEARNER bye\nTUTOR bye", "structure"),
    (L(), "min_turns"),
    (transcript(L(), T(), L()), "min_turns"),
    (T(), "alternation"),
    (transcript(L(), T(), L(), T(), L(), "[ASSISTANT]: ok", "[TEACHER]: again"), "alternation"),
    (transcript(L(), T(), "[TEACHER]: not a learner", T(), L(), T()), "alternation"),
]

# ===========================================================================
# RECORDS
# ===========================================================================

_TS = datetime(2026, 1, 1, tzinfo=timezone.utc)


def make_dialogue(dialogue_id: str, language: str = "amh", kind: DialogueKind = DialogueKind.DirectQA, entry_id: str = "", learner_turns: int = 3) -> TutorDialogue:
    turns = []
    for i in range(learner_turns):
        turns.append(Turn(role=Role.learner, content=f"{dialogue_id} question {i}"))
        turns.append(Turn(role=Role.tutor, content=f"{dialogue_id} answer {i}"))
    return TutorDialogue(dialogue_id=dialogue_id, language=language, kind=kind, turns=turns, entry_id=entry_id or f"{language}-{dialogue_id}")


def sft_request(request_id: str, language: str = "amh", kind: DialogueKind = DialogueKind.DirectQA, entry_id: str = "e") -> GenerationRequest:
    return GenerationRequest(
        request_id=request_id, entry_id=entry_id, language=language, headword="wuha", task="sft", kind=kind,
        prompt_text="Write a dialogue.", target_role="chosen-generator", seed=0, lineage_id=request_id,
    )


def dpo_request(
    lineage: str,
    role: str,
    combo: PairQualityCombo = PairQualityCombo.CorrectQueryCorrectResponse,
    neg: Optional[NegativeQueryType] = None,
    language: str = "amh",
    query: str = "What does wuha mean?",
) -> GenerationRequest:
    return GenerationRequest(
        request_id=f"{lineage}-{role.split('-')[0]}", entry_id=f"{language}-e", language=language, headword="wuha",
        task="dpo", combo=combo, negative_type=neg, prompt_text="Answer the learner.", target_role=role, seed=0,
        lineage_id=lineage, learner_query=query, response_format="response",
    )


def ok_record(request: GenerationRequest, parsed, backend: str = "mock") -> GenerationRecord:
    return GenerationRecord(
        request_id=request.request_id, backend=backend, raw_response="raw", parsed=parsed, status="ok",
        attempts=1, started_at=_TS, finished_at=_TS, request=request,
    )


def failed_record(request: GenerationRequest, status: str = "parse_failed") -> GenerationRecord:
    return GenerationRecord(
        request_id=request.request_id, backend="mock", status=status, reason="structure",
        attempts=4, started_at=_TS, finished_at=_TS, request=request,
    )


def dialogue_record(dialogue_id: str, language: str = "amh", kind: DialogueKind = DialogueKind.DirectQA, entry_id: str = "") -> GenerationRecord:
    d = make_dialogue(dialogue_id, language, kind, entry_id)
    return ok_record(sft_request(dialogue_id, language, kind, d.entry_id), d)


def response_record(request: GenerationRequest, text: str, backend: str = "mock") -> GenerationRecord:
    return ok_record(request, ResponseText(text=text), backend)


def inventory_shaped_records(scale: int = 100, seed: int = 0) -> Tuple[List[GenerationRecord], Dict[str, Dict[str, int]]]:
    """SFT records with per-language counts proportional to the reference inventory.

    Returns the records and a ledger language -> kind -> count.
    """
    from app.ingest import load_language_inventory

    rng = np.random.default_rng(seed)
    kinds = list(DialogueKind)
    records, ledger = [], {}
    for code, row in load_language_inventory().iterrows():
        n = int(round(int(row["sft_dialogues"]) / scale))
        ledger[code] = {}
        for i in range(n):
            kind = kinds[int(rng.integers(len(kinds)))]
            ledger[code][kind.value] = ledger[code].get(kind.value, 0) + 1
            records.append(dialogue_record(f"{code}-{i:04d}", code, kind, entry_id=f"{code}-entry{i // 2}"))
    return records, ledger


# ===========================================================================
# BACKENDS
# ===========================================================================


def mock_spec(name: str = "mock", concurrency: int = 4, max_attempts: int = 4, **mock) -> BackendSpec:
    return BackendSpec(
        name=name,
        provider="mock",
        max_concurrency=concurrency,
        retry=RetryPolicy(max_attempts=max_attempts, backoff_base=0.0, backoff_cap=0.0),
        mock=MockOptions(**mock),
    )


@pytest.fixture
def checkpoint(tmp_path):
    return str(tmp_path / "checkpoint.jsonl")
