"""Pydantic domain types shared across pipeline stages."""

from datetime import datetime
from enum import Enum
from typing import Annotated, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, Field, field_validator, model_validator

DEFAULT_LANGUAGES = ["amh", "hau", "ibo", "lin", "orm", "som", "swa", "tir", "yor", "zul"]
MIN_LEARNER_TURNS = 3
RATING_SCALE = (1, 3, 5, 7)

# ===========================================================================
# ENUMS
# ===========================================================================


class DialogueKind(str, Enum):
    DirectQA = "DirectQA"
    QuizMultipleChoice = "QuizMultipleChoice"
    FillInTheBlank = "FillInTheBlank"
    RolePlay = "RolePlay"
    ErrorCorrection = "ErrorCorrection"
    SentenceBuilding = "SentenceBuilding"
    TranslationPractice = "TranslationPractice"
    SpellingPronunciation = "SpellingPronunciation"
    CulturalNote = "CulturalNote"
    GrammarExplanation = "GrammarExplanation"


class NegativeQueryType(str, Enum):
    MisspelledTypo = "MisspelledTypo"
    VagueAmbiguous = "VagueAmbiguous"
    IrrelevantMixedContext = "IrrelevantMixedContext"
    FactuallyWrongPremise = "FactuallyWrongPremise"
    OutOfScopeNonsensical = "OutOfScopeNonsensical"


class PairQualityCombo(str, Enum):
    CorrectQueryCorrectResponse = "CorrectQueryCorrectResponse"
    IncorrectQueryCorrectResponse = "IncorrectQueryCorrectResponse"
    CorrectQueryIncorrectResponse = "CorrectQueryIncorrectResponse"


class Role(str, Enum):
    learner = "learner"
    tutor = "tutor"


TargetRole = Literal["chosen-generator", "rejected-generator", "judge"]
ResponseFormat = Literal["transcript", "response", "verdict"]
RecordStatus = Literal["ok", "parse_failed", "backend_failed", "exhausted_retries"]

# ===========================================================================
# DICTIONARY
# ===========================================================================


class DictEntry(BaseModel):
    entry_id: str = ""
    headword: str
    language: str
    translations: List[str] = Field(min_length=1)
    part_of_speech: Optional[str] = None
    example: Optional[str] = None
    notes: Optional[str] = None
    source_id: str = ""
    verified: bool = False
    script: Optional[str] = None

    @property
    def first_gloss(self) -> str:
        return self.translations[0]


# ===========================================================================
# GENERATION
# ===========================================================================


class GenerationRequest(BaseModel):
    request_id: str
    entry_id: str
    language: str
    headword: str = ""
    task: Literal["sft", "dpo", "judge"]
    kind: Optional[DialogueKind] = None
    negative_type: Optional[NegativeQueryType] = None
    combo: Optional[PairQualityCombo] = None
    prompt_text: str
    min_learner_turns: int = Field(default=MIN_LEARNER_TURNS, ge=MIN_LEARNER_TURNS)
    target_role: TargetRole
    seed: int
    lineage_id: str = ""
    learner_query: Optional[str] = None
    response_format: ResponseFormat = "transcript"

    @model_validator(mode="after")
    def _check_shape(self):
        if self.task == "sft" and self.kind is None:
            raise ValueError("sft requests need a dialogue kind")
        if self.task == "dpo" and self.combo is None:
            raise ValueError("dpo requests need a pair-quality combo")
        if self.task != "judge":
            for marker in ("[WORD]", "[WRONG_MEANING]"):
                if marker in self.prompt_text:
                    raise ValueError(f"residual slot marker {marker} in prompt")
        return self


class RetryPolicy(BaseModel):
    max_attempts: int = Field(default=4, ge=1)
    backoff_base: float = Field(default=0.5, ge=0)
    backoff_cap: float = Field(default=8.0, ge=0)
    retry_on_parse_failure: bool = True


class MockOptions(BaseModel):
    fault_rate: float = Field(default=0.0, ge=0.0, le=1.0)
    fault_status: int = 503
    failing_attempts: int = Field(default=0, ge=0)
    malformed_attempts: int = Field(default=0, ge=0)
    latency_s: float = Field(default=0.0, ge=0.0)
    fixed_scores: Optional[List[int]] = None


class BackendSpec(BaseModel):
    name: str
    provider: Literal["mock", "openai-chat", "gemini"] = "mock"
    endpoint: Optional[str] = None
    model: str = "mock"
    auth_env: Optional[str] = None
    max_concurrency: int = Field(default=4, ge=1)
    retry: RetryPolicy = Field(default_factory=RetryPolicy)
    timeout_s: float = Field(default=60.0, gt=0)
    temperature: Optional[float] = None
    max_output_tokens: Optional[int] = None
    mock: MockOptions = Field(default_factory=MockOptions)


class Turn(BaseModel):
    role: Role
    content: str = Field(min_length=1)


class TutorDialogue(BaseModel):
    type: Literal["dialogue"] = "dialogue"
    dialogue_id: str = ""
    language: str = ""
    kind: Optional[DialogueKind] = None
    turns: List[Turn]
    entry_id: str = ""
    system_preamble: Optional[str] = None

    @model_validator(mode="after")
    def _check_turns(self):
        for i, turn in enumerate(self.turns):
            expected = Role.learner if i % 2 == 0 else Role.tutor
            if turn.role != expected:
                raise ValueError(f"turn {i} should be {expected.value}")
        if self.turns and self.turns[-1].role != Role.tutor:
            raise ValueError("dialogue must end with a tutor turn")
        if self.learner_turns < MIN_LEARNER_TURNS:
            raise ValueError(f"need at least {MIN_LEARNER_TURNS} learner turns")
        return self

    @property
    def learner_turns(self) -> int:
        return sum(1 for t in self.turns if t.role == Role.learner)


class ResponseText(BaseModel):
    type: Literal["response"] = "response"
    text: str = Field(min_length=1)


class JudgeVerdict(BaseModel):
    type: Literal["verdict"] = "verdict"
    instruction_following_rationale: str = Field(min_length=1)
    instruction_alignment_score: int
    pedagogical_completeness_rationale: str = Field(min_length=1)
    pedagogical_completeness_score: int
    linguistic_cultural_accuracy_rationale: str = Field(min_length=1)
    linguistic_cultural_accuracy_score: int
    coherence_and_naturalness_rationale: str = Field(min_length=1)
    coherence_and_naturalness_score: int

    @field_validator(
        "instruction_alignment_score",
        "pedagogical_completeness_score",
        "linguistic_cultural_accuracy_score",
        "coherence_and_naturalness_score",
    )
    @classmethod
    def _on_scale(cls, v: int) -> int:
        if v not in RATING_SCALE:
            raise ValueError(f"score {v} not in {RATING_SCALE}")
        return v


ParsedOutput = Annotated[Union[TutorDialogue, ResponseText, JudgeVerdict], Field(discriminator="type")]


class GenerationRecord(BaseModel):
    request_id: str
    backend: str
    raw_response: str = ""
    parsed: Optional[ParsedOutput] = None
    status: RecordStatus
    reason: Optional[str] = None
    attempts: int = Field(ge=0)
    started_at: datetime
    finished_at: datetime
    request: Optional[GenerationRequest] = None

    @model_validator(mode="after")
    def _ok_iff_parsed(self):
        if (self.status == "ok") != (self.parsed is not None):
            raise ValueError("status 'ok' must coincide with a parsed payload")
        return self

# ===========================================================================
# DATASETS
# ===========================================================================


class PairProvenance(BaseModel):
    entry_id: str
    lineage_id: str
    chosen_backend: str
    rejected_backend: str


class PreferencePair(BaseModel):
    pair_id: str
    language: str
    prompt: str = Field(min_length=1)
    chosen: str = Field(min_length=1)
    rejected: str = Field(min_length=1)
    combo: PairQualityCombo
    negative_type: Optional[NegativeQueryType] = None
    provenance: PairProvenance

    @model_validator(mode="after")
    def _check_pair(self):
        if self.chosen == self.rejected:
            raise ValueError("chosen and rejected must differ")
        perturbed = self.combo == PairQualityCombo.IncorrectQueryCorrectResponse
        if perturbed != (self.negative_type is not None):
            raise ValueError("negative_type is set exactly when the query was perturbed")
        return self


class SplitSpec(BaseModel):
    test_size: Optional[int] = Field(default=None, ge=0)
    test_fraction: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    per_language: Dict[str, int] = Field(default_factory=dict)
    seed: int = 0

    @model_validator(mode="after")
    def _one_of(self):
        if self.test_size is not None and self.test_fraction is not None:
            raise ValueError("set test_size or test_fraction, not both")
        return self

    def size_for(self, language: str, available: int) -> int:
        if language in self.per_language:
            return int(self.per_language[language])
        if self.test_size is not None:
            return self.test_size
        if self.test_fraction is not None:
            return int(round(self.test_fraction * available))
        return 0
