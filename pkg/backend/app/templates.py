"""Prompt templates: SFT dialogue prompts, DPO query/response prompts, batch planning."""

import hashlib
import logging
import os
import re
from functools import lru_cache
from typing import Annotated, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field

from app.errors import ConfigurationError, PlanningError, TemplateError
from app.ingest import load_language_inventory
from app.models import (
    MIN_LEARNER_TURNS,
    DialogueKind,
    DictEntry,
    GenerationRequest,
    NegativeQueryType,
    PairQualityCombo,
)
from app.transcript import TAG_NAMES

logger = logging.getLogger(__name__)

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))  # backend/
TEMPLATE_DIR = os.path.join(ROOT, "data", "templates")

KNOWN_SLOTS = {
    "WORD", "LANGUAGE", "MEANING", "POS", "EXAMPLE", "MIN_TURNS",
    "QUERY", "WRONG_MEANING", "MISSPELLED_WORD",
}
_SLOT = re.compile(r"\[([A-Z_]+)\]")
# Transcript role tags share the bracket syntax but are passed through untouched.
ROLE_TAGS = frozenset(TAG_NAMES.values())
_VARIANT_SEP = re.compile(r"^---\s*$", re.MULTILINE)

# Used when a language has no other entry to borrow a wrong gloss from.
GENERIC_WRONG_MEANINGS = ["a kind of fish", "yesterday", "mountain", "to whistle", "a cooking pot", "blue"]

COMPATIBLE_COMBOS: Dict[PairQualityCombo, bool] = {
    # combo -> whether the query carries a negative perturbation
    PairQualityCombo.CorrectQueryCorrectResponse: False,
    PairQualityCombo.IncorrectQueryCorrectResponse: True,
    PairQualityCombo.CorrectQueryIncorrectResponse: False,
}

# ===========================================================================
# HELPERS
# ===========================================================================


def derive_seed(seed: int, *parts) -> int:
    key = "|".join([str(seed), *[str(p) for p in parts]])
    return int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "big") >> 1


def _short_hash(*parts) -> str:
    return hashlib.sha1("|".join(str(p) for p in parts).encode("utf-8")).hexdigest()[:16]


@lru_cache(maxsize=None)
def load_variants(relpath: str) -> Tuple[str, ...]:
    path = os.path.join(TEMPLATE_DIR, relpath)
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise TemplateError(f"template missing: {relpath}") from e
    variants = tuple(v.strip() for v in _VARIANT_SEP.split(text) if v.strip())
    if not variants:
        raise TemplateError(f"template empty: {relpath}")
    for v in variants:
        unknown = set(_SLOT.findall(v)) - KNOWN_SLOTS - ROLE_TAGS
        if unknown:
            raise TemplateError(f"{relpath}: unknown slot(s) {sorted(unknown)}")
    return variants


def pick_variant(relpath: str, seed: int) -> str:
    variants = load_variants(relpath)
    return variants[derive_seed(seed, relpath) % len(variants)]


def fill_slots(template: str, values: Dict[str, str]) -> str:
    """Single-pass substitution so filled values are never rescanned."""
    def sub(m: re.Match) -> str:
        name = m.group(1)
        if name in ROLE_TAGS:
            return m.group(0)
        if name not in values:
            raise TemplateError(f"no value for slot [{name}]")
        return values[name]
    return _SLOT.sub(sub, template)


def language_name(code: str) -> str:
    try:
        return str(load_language_inventory().loc[code, "name"])
    except (KeyError, OSError):
        return code


def _base_slots(entry: DictEntry, min_turns: int = MIN_LEARNER_TURNS) -> Dict[str, str]:
    return {
        "WORD": entry.headword,
        "LANGUAGE": language_name(entry.language),
        "MEANING": entry.first_gloss,
        "POS": entry.part_of_speech or "part of speech unspecified",
        "EXAMPLE": entry.example or "a short everyday sentence",
        "MIN_TURNS": str(min_turns),
    }


# ===========================================================================
# PERTURBATION
# ===========================================================================

VOWELS = set("aeiouAEIOUáéíóúàèìòùâêîôûäëïöüɛɔẹọ")
PHONETIC = [
    ("ph", "f"), ("f", "ph"), ("sh", "x"), ("ch", "c"), ("c", "k"), ("k", "c"),
    ("q", "k"), ("s", "z"), ("z", "s"), ("i", "ee"), ("u", "oo"), ("w", "u"),
    ("y", "i"), ("gb", "b"), ("kp", "p"), ("ng", "n"), ("o", "u"), ("e", "a"),
]


def _swap(word: str, rng: np.random.Generator) -> Optional[str]:
    spots = [i for i in range(len(word) - 1) if word[i] != word[i + 1]]
    if not spots:
        return None
    i = spots[int(rng.integers(len(spots)))]
    return word[:i] + word[i + 1] + word[i] + word[i + 2:]


def _omit_vowel(word: str, rng: np.random.Generator) -> Optional[str]:
    spots = [i for i, ch in enumerate(word) if ch in VOWELS]
    if len(word) < 2 or not spots:
        return None
    i = spots[int(rng.integers(len(spots)))]
    return word[:i] + word[i + 1:]


def _omit_char(word: str, rng: np.random.Generator) -> Optional[str]:
    if len(word) < 3:
        return None
    i = int(rng.integers(len(word)))
    return word[:i] + word[i + 1:]


def _phonetic(word: str, rng: np.random.Generator) -> Optional[str]:
    lower = word.lower()
    options = [(src, dst) for src, dst in PHONETIC if src in lower]
    if not options:
        return None
    src, dst = options[int(rng.integers(len(options)))]
    i = lower.index(src)
    return word[:i] + dst + word[i + len(src):]


def perturb_headword(word: str, rng: np.random.Generator) -> str:
    """Typo-style misspelling. Always differs from ``word``, edit distance 1-3."""
    ops = [_swap, _omit_vowel, _omit_char, _phonetic]
    for idx in rng.permutation(len(ops)):
        out = ops[int(idx)](word, rng)
        if out and out != word:
            return out
    i = int(rng.integers(len(word))) if word else 0
    return word[:i + 1] + word[i:i + 1] + word[i + 1:] if word else "x"


def _wrong_meaning(entry: DictEntry, pool: Optional[List[str]], seed: int) -> str:
    own = {g.casefold() for g in entry.translations}
    candidates = sorted({g for g in (pool or []) if g.casefold() not in own})
    if not candidates:
        candidates = [g for g in GENERIC_WRONG_MEANINGS if g.casefold() not in own]
    return candidates[derive_seed(seed, "wrong", entry.entry_id) % len(candidates)]


# ===========================================================================
# INSTANTIATION
# ===========================================================================


def instantiate_sft(entry: DictEntry, kind: DialogueKind, seed: int, min_learner_turns: int = MIN_LEARNER_TURNS) -> GenerationRequest:
    body = pick_variant(f"sft/{kind.value}.txt", seed)
    fmt = pick_variant("sft/_format.txt", seed)
    slots = _base_slots(entry, min_learner_turns)
    prompt = fill_slots(body, slots) + "\n\n" + fill_slots(fmt, slots)
    request_id = f"sft-{_short_hash(entry.entry_id, kind.value, seed)}"
    return GenerationRequest(
        request_id=request_id,
        entry_id=entry.entry_id,
        language=entry.language,
        headword=entry.headword,
        task="sft",
        kind=kind,
        prompt_text=prompt,
        min_learner_turns=min_learner_turns,
        target_role="chosen-generator",
        seed=seed,
        lineage_id=request_id,
        response_format="transcript",
    )


def instantiate_dpo(
    entry: DictEntry,
    neg: Optional[NegativeQueryType],
    combo: PairQualityCombo,
    seed: int,
    wrong_meaning_pool: Optional[List[str]] = None,
) -> Tuple[GenerationRequest, GenerationRequest]:
    perturbed = COMPATIBLE_COMBOS[combo]
    if perturbed and neg is None:
        raise ValueError(f"{combo.value} requires a negative query type")
    if not perturbed and neg is not None:
        raise ValueError(f"{combo.value} uses a well-formed query; got negative type {neg.value}")

    rng = np.random.default_rng(derive_seed(seed, "perturb", entry.entry_id))
    slots = _base_slots(entry)
    slots["WRONG_MEANING"] = _wrong_meaning(entry, wrong_meaning_pool, seed)
    slots["MISSPELLED_WORD"] = perturb_headword(entry.headword, rng)

    query_name = neg.value if neg else "Correct"
    query = fill_slots(pick_variant(f"dpo/query/{query_name}.txt", seed), slots)
    slots["QUERY"] = query

    lineage = f"dpo-{_short_hash(entry.entry_id, combo.value, query_name, seed)}"
    reqs = []
    for role in ("chosen-generator", "rejected-generator"):
        prompt = fill_slots(pick_variant(f"dpo/{role}/{combo.value}.txt", seed), slots)
        reqs.append(GenerationRequest(
            request_id=f"{lineage}-{role.split('-')[0]}",
            entry_id=entry.entry_id,
            language=entry.language,
            headword=entry.headword,
            task="dpo",
            negative_type=neg,
            combo=combo,
            prompt_text=prompt,
            target_role=role,
            seed=seed,
            lineage_id=lineage,
            learner_query=query,
            response_format="response",
        ))
    return reqs[0], reqs[1]


# ===========================================================================
# PLANNING
# ===========================================================================


class Quotas(BaseModel):
    """Per-kind request counts.

    Keys are dialogue kind names, pair-combo names, or
    ``IncorrectQueryCorrectResponse:<NegativeQueryType>``. A bare
    ``IncorrectQueryCorrectResponse`` key spreads its units over the negative
    types. ``total`` samples that many units over ``weights`` (default: the ten
    dialogue kinds, uniformly) and adds them to ``per_kind``.
    """

    per_kind: Dict[str, Annotated[int, Field(ge=0)]] = Field(default_factory=dict)
    total: Optional[int] = Field(default=None, ge=0)
    weights: Optional[Dict[str, Annotated[float, Field(ge=0)]]] = None
    languages: Optional[List[str]] = None
    min_learner_turns: int = Field(default=MIN_LEARNER_TURNS, ge=MIN_LEARNER_TURNS)


def _parse_key(key: str) -> Tuple[str, object, Optional[NegativeQueryType]]:
    if key in DialogueKind.__members__:
        return "sft", DialogueKind(key), None
    combo_name, _, neg_name = key.partition(":")
    if combo_name not in PairQualityCombo.__members__:
        raise ConfigurationError(f"unknown quota key '{key}'")
    combo = PairQualityCombo(combo_name)
    neg = None
    if neg_name:
        if neg_name not in NegativeQueryType.__members__:
            raise ConfigurationError(f"unknown negative query type in quota key '{key}'")
        neg = NegativeQueryType(neg_name)
    if neg is not None and not COMPATIBLE_COMBOS[combo]:
        raise ConfigurationError(f"quota key '{key}': {combo_name} does not take a negative type")
    return "dpo", combo, neg


def _unit_counts(quotas: Quotas, rng: np.random.Generator) -> Dict[str, int]:
    counts = {k: int(v) for k, v in quotas.per_kind.items()}
    if quotas.total:
        weights = quotas.weights or {k.value: 1.0 for k in DialogueKind}
        keys = sorted(weights)
        p = np.array([weights[k] for k in keys], dtype=np.float64)
        if p.sum() <= 0:
            raise ConfigurationError("quota weights sum to zero")
        drawn = rng.multinomial(quotas.total, p / p.sum())
        for k, n in zip(keys, drawn):
            counts[k] = counts.get(k, 0) + int(n)
    return {k: counts[k] for k in sorted(counts) if counts[k] > 0}


def plan_batch(corpus: List[DictEntry], quotas: Quotas, seed: int) -> List[GenerationRequest]:
    """Expand quotas into concrete generation requests.

    Deterministic for a fixed seed and independent of corpus order. Each DPO
    unit yields two requests (chosen and rejected).
    """
    entries = sorted(corpus, key=lambda e: e.entry_id)
    languages = quotas.languages or [None]
    requests: List[GenerationRequest] = []
    index = 0

    for lang in languages:
        pool = [e for e in entries if lang is None or e.language == lang]
        rng = np.random.default_rng(derive_seed(seed, "plan", lang or "*"))
        counts = _unit_counts(quotas, rng)
        if not counts:
            continue
        if not pool:
            raise PlanningError(f"quota > 0 but the corpus has no entries for language '{lang or '*'}'")

        glosses: Dict[str, List[str]] = {}
        for e in pool:
            glosses.setdefault(e.language, []).extend(e.translations)

        negs = list(NegativeQueryType)
        for key, n in counts.items():
            task, kind, neg = _parse_key(key)
            picks = rng.choice(len(pool), size=n, replace=n > len(pool))
            for j in picks:
                entry = pool[int(j)]
                req_seed = derive_seed(seed, index)
                index += 1
                if task == "sft":
                    requests.append(instantiate_sft(entry, kind, req_seed, quotas.min_learner_turns))
                    continue
                unit_neg = neg
                if COMPATIBLE_COMBOS[kind] and unit_neg is None:
                    unit_neg = negs[int(rng.integers(len(negs)))]
                chosen, rejected = instantiate_dpo(entry, unit_neg, kind, req_seed, glosses.get(entry.language))
                requests.extend([chosen, rejected])

    logger.info("Planned %d generation requests", len(requests))
    return requests
