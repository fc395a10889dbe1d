"""Deterministic offline backend for tests and dry pipelines."""

import asyncio
import hashlib
import json
from collections import defaultdict
from typing import Dict, List

from app.errors import classify_status
from app.models import RATING_SCALE, BackendSpec, GenerationRequest, MockOptions, Role, Turn
from app.transcript import format_transcript

LEARNER_LINES = [
    'What does "{w}" mean?',
    'Can you use "{w}" in a sentence for me?',
    'Is "{w}" formal or informal?',
    'How do I pronounce "{w}"?',
    'Could you give me another example with "{w}"?',
    'Did I use "{w}" correctly just now?',
]
TUTOR_LINES = [
    'Good question! "{w}" is a common word. Here is a short explanation with an example.',
    'Sure. In a sentence you could say it like this, and here is the English translation.',
    'It is used in everyday speech, and people of all ages say it.',
    'Say it slowly, syllable by syllable, and keep the vowels short.',
    'Here is another example, followed by a small practice question for you.',
    'Almost! Let me show you the corrected sentence and explain the change.',
]
RATIONALE = "Mock rationale for {c} on item {i}."
MALFORMED = "Sorry, I lost the format. Here is some prose without tags or braces."


def _digest(*parts) -> int:
    key = "|".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "big")


def mock_transcript(request: GenerationRequest, seed: int = 0) -> str:
    h = _digest(request.request_id, seed)
    learners = max(request.min_learner_turns, 3 + h % 2)
    word = request.headword or request.entry_id
    turns: List[Turn] = []
    for i in range(learners):
        turns.append(Turn(role=Role.learner, content=LEARNER_LINES[(h + i) % len(LEARNER_LINES)].format(w=word)))
        turns.append(Turn(role=Role.tutor, content=TUTOR_LINES[(h + i) % len(TUTOR_LINES)].format(w=word)))
    return format_transcript(turns)


def mock_response(request: GenerationRequest, seed: int = 0) -> str:
    h = _digest(request.request_id, seed)
    word = request.headword or request.entry_id
    if request.target_role == "rejected-generator":
        return f'"{word}" just means what it says. ({h % 997})'
    return (
        f'Good question! "{word}" is explained here with an example sentence, '
        f"its English translation, and a short practice question. ({h % 997})"
    )


def mock_verdict(request: GenerationRequest, seed: int = 0, fixed_scores=None) -> str:
    h = _digest(request.request_id, seed)
    criteria = ["instruction_alignment", "pedagogical_completeness", "linguistic_cultural_accuracy", "coherence_and_naturalness"]
    scores = list(fixed_scores) if fixed_scores else [RATING_SCALE[(h >> (4 * i)) % 4] for i in range(4)]
    rationale_keys = [
        "instruction_following_rationale",
        "pedagogical_completeness_rationale",
        "linguistic_cultural_accuracy_rationale",
        "coherence_and_naturalness_rationale",
    ]
    obj: Dict[str, object] = {}
    for c, rk, s in zip(criteria, rationale_keys, scores):
        obj[rk] = RATIONALE.format(c=c.replace("_", " "), i=request.request_id)
        obj[f"{c}_score"] = s
    return json.dumps(obj)


def mock_backend(request: GenerationRequest, seed: int = 0, options: MockOptions = None) -> str:
    """Pure function of (request, seed): always parseable for its response format."""
    if request.response_format == "verdict":
        return mock_verdict(request, seed, options.fixed_scores if options else None)
    if request.response_format == "response":
        return mock_response(request, seed)
    return mock_transcript(request, seed)


class MockBackend:
    """Async wrapper around ``mock_backend`` with fault injection and counters."""

    def __init__(self, spec: BackendSpec, seed: int = 0):
        self.name = spec.name
        self.spec = spec
        self.options = spec.mock
        self.seed = seed
        self.calls = 0
        self.in_flight = 0
        self.peak_in_flight = 0
        self.attempts: Dict[str, int] = defaultdict(int)
        self.successes: Dict[str, int] = defaultdict(int)

    async def complete(self, request: GenerationRequest) -> str:
        self.calls += 1
        self.attempts[request.request_id] += 1
        attempt = self.attempts[request.request_id]
        self.in_flight += 1
        self.peak_in_flight = max(self.peak_in_flight, self.in_flight)
        try:
            if self.options.latency_s:
                await asyncio.sleep(self.options.latency_s)
            else:
                await asyncio.sleep(0)
            if attempt <= self.options.failing_attempts or self._faulty(request, attempt):
                status = self.options.fault_status
                raise classify_status(status)(f"HTTP {status} (injected)", status_code=status)
            if attempt <= self.options.malformed_attempts + self.options.failing_attempts:
                return "" if request.response_format == "response" else MALFORMED
            self.successes[request.request_id] += 1
            return mock_backend(request, self.seed, self.options)
        finally:
            self.in_flight -= 1

    def _faulty(self, request: GenerationRequest, attempt: int) -> bool:
        if self.options.fault_rate <= 0:
            return False
        if self.options.fault_rate >= 1:
            return True
        return (_digest(request.request_id, self.seed, attempt, "fault") % 10_000) < self.options.fault_rate * 10_000

    async def aclose(self) -> None:
        return None


