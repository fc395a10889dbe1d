import json
import os
from typing import Dict, List, Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from app.errors import ConfigurationError
from app.ingest import SourceSpec
from app.metrics import ChrfConfig
from app.models import DEFAULT_LANGUAGES, BackendSpec, DialogueKind, NegativeQueryType, PairQualityCombo, SplitSpec, TargetRole
from app.templates import Quotas

load_dotenv()

CONFIG_VERSION = 1
BACKEND_ROLES: List[TargetRole] = ["chosen-generator", "rejected-generator", "judge"]


def default_quotas() -> Quotas:
    """One unit of every dialogue kind and every pair shape."""
    per_kind = {k.value: 1 for k in DialogueKind}
    per_kind[PairQualityCombo.CorrectQueryCorrectResponse.value] = 1
    per_kind[PairQualityCombo.CorrectQueryIncorrectResponse.value] = 1
    for neg in NegativeQueryType:
        per_kind[f"{PairQualityCombo.IncorrectQueryCorrectResponse.value}:{neg.value}"] = 1
    return Quotas(per_kind=per_kind)


class PipelineConfig(BaseModel):
    """Single versioned run configuration. Secrets never live here."""

    model_config = ConfigDict(extra="forbid")

    config_version: int = CONFIG_VERSION
    seed: int
    languages: List[str] = Field(default_factory=lambda: list(DEFAULT_LANGUAGES))
    corpus_paths: List[str] = Field(default_factory=list)
    sources: List[SourceSpec] = Field(default_factory=list)
    backends: Dict[TargetRole, BackendSpec] = Field(default_factory=dict)
    quotas: Quotas = Field(default_factory=default_quotas)
    split: SplitSpec = Field(default_factory=SplitSpec)
    chrf: ChrfConfig = Field(default_factory=ChrfConfig)
    kappa_weighting: Literal["linear", "quadratic"] = "quadratic"
    retention_fraction: float = Field(default=0.9, gt=0.0, le=1.0)
    judge_flatten: Literal["final_turn", "dialogue"] = "final_turn"
    system_preamble: Optional[str] = None
    output_dir: str = "runs/default"

    @field_validator("config_version")
    @classmethod
    def _supported(cls, v: int) -> int:
        if v != CONFIG_VERSION:
            raise ValueError(f"config_version {v} is not supported (expected {CONFIG_VERSION})")
        return v

    def backend(self, role: TargetRole) -> BackendSpec:
        return self.backends.get(role) or BackendSpec(name=f"mock-{role}", provider="mock")

    def use_provider(self, provider: str) -> "PipelineConfig":
        """Copy with every backend role switched to ``provider``."""
        backends = {}
        for role in BACKEND_ROLES:
            spec = self.backend(role)
            if spec.provider != provider:
                spec = BackendSpec(name=f"{provider}-{role}", provider=provider, max_concurrency=spec.max_concurrency, retry=spec.retry, mock=spec.mock)
            backends[role] = spec
        return self.model_copy(update={"backends": backends})

    def check_paths(self) -> None:
        missing = [s.path for s in self.sources if not os.path.exists(s.path)]
        missing += [p for p in self.corpus_paths if not os.path.exists(p)]
        if missing:
            raise ConfigurationError(f"path(s) referenced by the config do not exist: {', '.join(missing)}")


def _resolve(base: str, path: str) -> str:
    return path if os.path.isabs(path) else os.path.normpath(os.path.join(base, path))


def load_config(path: Optional[str] = None, seed: Optional[int] = None, output_dir: Optional[str] = None) -> PipelineConfig:
    """Load the JSON config; command-line values override file values.

    Relative paths inside the file are taken relative to the file itself.
    """
    data: dict = {}
    base = os.getcwd()
    if path:
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except OSError as e:
            raise ConfigurationError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"config {path} is not valid JSON: {e.msg} (line {e.lineno})") from e
        if not isinstance(data, dict):
            raise ConfigurationError(f"config {path} must hold a JSON object")
        base = os.path.dirname(os.path.abspath(path))

    if seed is not None:
        data["seed"] = seed
    if output_dir is not None:
        data["output_dir"] = output_dir
    if "seed" not in data:
        raise ConfigurationError("a seed is required (config 'seed' or --seed)")

    try:
        cfg = PipelineConfig.model_validate(data)
    except ValidationError as e:
        err = e.errors()[0]
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        raise ConfigurationError(f"invalid config at '{loc}': {err['msg']}") from e

    sources = [s.model_copy(update={"path": _resolve(base, s.path)}) for s in cfg.sources]
    corpus_paths = [_resolve(base, p) for p in cfg.corpus_paths]
    if path and "output_dir" in data and output_dir is None:
        out = _resolve(base, cfg.output_dir)
    else:
        out = cfg.output_dir
    return cfg.model_copy(update={"sources": sources, "corpus_paths": corpus_paths, "output_dir": out})
