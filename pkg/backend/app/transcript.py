"""Role-tagged transcript format for generated dialogues.

One turn per tag line::

    [LEARNER]: What does "selam" mean?
    [TUTOR]: It means "peace" ...

Content continues on following lines until the next tag.
"""

import re
from typing import List, Tuple

from app.errors import ConfigurationError, ResponseParseError
from app.models import MIN_LEARNER_TURNS, GenerationRequest, ResponseText, Role, Turn, TutorDialogue

ROLE_ALIASES = {
    "learner": Role.learner, "student": Role.learner, "user": Role.learner,
    "tutor": Role.tutor, "teacher": Role.tutor, "assistant": Role.tutor,
}
TAG_LINE = re.compile(
    r"^\s*(?:\*\*)?\[?(learner|student|user|tutor|teacher|assistant)\]?(?:\*\*)?\s*:(?:\*\*)?\s?(.*)$",
    re.IGNORECASE,
)
TAG_NAMES = {Role.learner: "LEARNER", Role.tutor: "TUTOR"}


def split_turns(raw: str) -> List[Tuple[Role, str]]:
    turns: List[Tuple[Role, List[str]]] = []
    for line in raw.strip().splitlines():
        m = TAG_LINE.match(line)
        if m:
            turns.append((ROLE_ALIASES[m.group(1).lower()], [m.group(2)]))
        elif turns:
            turns[-1][1].append(line)
        elif line.strip():
            raise ResponseParseError("structure", "text before the first role tag")
    if not turns:
        raise ResponseParseError("structure", "no role-tagged turns found")
    return [(role, "\n".join(lines).strip()) for role, lines in turns]


def parse_dialogue(raw: str, min_learner_turns: int = MIN_LEARNER_TURNS) -> TutorDialogue:
    if min_learner_turns < MIN_LEARNER_TURNS:
        raise ValueError(f"min_learner_turns must be >= {MIN_LEARNER_TURNS}")
    turns = split_turns(raw)

    for i, (_, content) in enumerate(turns):
        if not content:
            raise ResponseParseError("empty_turn", f"turn {i + 1} has no content")
    for i, (role, _) in enumerate(turns):
        expected = Role.learner if i % 2 == 0 else Role.tutor
        if role != expected:
            raise ResponseParseError("alternation", f"turn {i + 1} is {role.value}, expected {expected.value}")
    learners = sum(1 for role, _ in turns if role == Role.learner)
    if learners < min_learner_turns:
        raise ResponseParseError("min_turns", f"{learners} learner turns, need {min_learner_turns}")
    if turns[-1][0] != Role.tutor:
        raise ResponseParseError("structure", "last learner turn has no tutor answer")

    return TutorDialogue(turns=[Turn(role=r, content=c) for r, c in turns])


def format_transcript(turns: List[Turn]) -> str:
    return "\n".join(f"[{TAG_NAMES[t.role]}]: {t.content}" for t in turns)


_FENCE = re.compile(r"^```[a-zA-Z]*\s*\n?(.*?)\n?```$", re.DOTALL)


def parse_response(raw: str) -> ResponseText:
    """Single tutor reply (DPO side). An optional leading tutor tag is dropped."""
    text = raw.strip()
    m = _FENCE.match(text)
    if m:
        text = m.group(1).strip()
    tag = TAG_LINE.match(text.split("\n", 1)[0]) if text else None
    if tag:
        if ROLE_ALIASES[tag.group(1).lower()] != Role.tutor:
            raise ResponseParseError("structure", "reply is tagged as a learner turn")
        rest = text.split("\n", 1)[1] if "\n" in text else ""
        text = (tag.group(2) + ("\n" + rest if rest else "")).strip()
    if not text:
        raise ResponseParseError("empty_response")
    return ResponseText(text=text)


def parse_for_request(request: GenerationRequest, raw: str):
    if request.response_format == "transcript":
        dialogue = parse_dialogue(raw, request.min_learner_turns)
        return dialogue.model_copy(update={
            "dialogue_id": request.request_id,
            "language": request.language,
            "kind": request.kind,
            "entry_id": request.entry_id,
        })
    if request.response_format == "response":
        return parse_response(raw)
    raise ConfigurationError(f"no default parser for response format '{request.response_format}'")
