import pytest

from app.errors import ConfigurationError, ResponseParseError
from app.models import DialogueKind, Role
from app.transcript import format_transcript, parse_dialogue, parse_for_request, parse_response

from conftest import ADVERSARIAL_TRANSCRIPTS, GOOD_TRANSCRIPT, L, T, dpo_request, sft_request, transcript


def test_good_transcript_parses():
    d = parse_dialogue(GOOD_TRANSCRIPT)
    assert len(d.turns) == 6
    assert d.learner_turns == 3
    assert d.turns[0].role == Role.learner
    assert d.turns[0].content == "What does wuha mean?"
    assert d.turns[-1].role == Role.tutor


def test_adversarial_fixture_size():
    assert len(ADVERSARIAL_TRANSCRIPTS) == 31


@pytest.mark.parametrize("raw,reason", ADVERSARIAL_TRANSCRIPTS)
def test_adversarial_transcripts_are_rejected(raw, reason):
    with pytest.raises(ResponseParseError) as exc:
        parse_dialogue(raw)
    assert exc.value.reason == reason


def test_multiline_turn_content():
    raw = transcript(L("First line"), "second line", T(), L(), T(), L(), T())
    d = parse_dialogue(raw)
    assert d.turns[0].content == "First line\nsecond line"


def test_tag_aliases_and_markdown_tags():
    raw = "\n".join([
        "**Student:** hi", "**Teacher:** hello",
        "user: question", "assistant: answer",
        "[learner]: more", "[tutor]: done",
    ])
    d = parse_dialogue(raw)
    assert [t.role for t in d.turns] == [Role.learner, Role.tutor] * 3
    assert d.turns[1].content == "hello"


def test_surrounding_blank_lines_are_ignored():
    assert parse_dialogue("\n\n" + GOOD_TRANSCRIPT + "\n\n").learner_turns == 3


def test_higher_minimum():
    with pytest.raises(ResponseParseError) as exc:
        parse_dialogue(GOOD_TRANSCRIPT, min_learner_turns=4)
    assert exc.value.reason == "min_turns"


def test_minimum_below_floor_is_a_caller_error():
    with pytest.raises(ValueError):
        parse_dialogue(GOOD_TRANSCRIPT, min_learner_turns=2)


def test_format_round_trips_turns():
    d = parse_dialogue(GOOD_TRANSCRIPT)
    assert format_transcript(d.turns) == GOOD_TRANSCRIPT
    assert parse_dialogue(format_transcript(d.turns)).turns == d.turns


# ===========================================================================
# single responses
# ===========================================================================


@pytest.mark.parametrize("raw", [
    "Wuha means water.",
    "[TUTOR]: Wuha means water.",
    "```\nWuha means water.\n```",
    "  Wuha means water.  \n",
])
def test_parse_response_variants(raw):
    assert parse_response(raw).text == "Wuha means water."


def test_parse_response_keeps_following_lines():
    assert parse_response("Tutor: line one\nline two").text == "line one\nline two"


@pytest.mark.parametrize("raw,reason", [
    ("", "empty_response"),
    ("   \n ", "empty_response"),
    ("[TUTOR]:", "empty_response"),
    ("[LEARNER]: what?", "structure"),
])
def test_parse_response_failures(raw, reason):
    with pytest.raises(ResponseParseError) as exc:
        parse_response(raw)
    assert exc.value.reason == reason


# ===========================================================================
# request dispatch
# ===========================================================================


def test_parse_for_request_stamps_dialogue_metadata():
    req = sft_request("r1", language="zul", kind=DialogueKind.RolePlay, entry_id="zul-e1")
    d = parse_for_request(req, GOOD_TRANSCRIPT)
    assert (d.dialogue_id, d.language, d.kind, d.entry_id) == ("r1", "zul", DialogueKind.RolePlay, "zul-e1")


def test_parse_for_request_response_format():
    req = dpo_request("lin1", "chosen-generator")
    assert parse_for_request(req, "Wuha means water.").text == "Wuha means water."


def test_parse_for_request_has_no_default_verdict_parser():
    req = dpo_request("lin1", "chosen-generator").model_copy(update={"response_format": "verdict"})
    with pytest.raises(ConfigurationError):
        parse_for_request(req, "{}")
