"""Dictionary ingestion: parse raw sources, normalize, dedupe, validate."""

import hashlib
import logging
import os
import re
import unicodedata
from collections import Counter
from functools import lru_cache
from typing import Callable, Dict, Iterator, List, Optional, Tuple, Union

import pandas as pd
from pydantic import BaseModel, Field, ValidationError, model_validator

from app.errors import ConfigurationError, CorpusValidationError, DataError, NormalizationError, ParseRejectError
from app.jsonl import iter_jsonl, write_json, write_jsonl
from app.models import DEFAULT_LANGUAGES, DictEntry

logger = logging.getLogger(__name__)

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))  # backend/
REFERENCE_DIR = os.path.join(ROOT, "data", "reference")

# ===========================================================================
# MODELS
# ===========================================================================


class Reject(BaseModel):
    source_id: str = ""
    line: int
    reason: str
    text: str = ""


class ParseResult(BaseModel):
    entries: List[DictEntry] = Field(default_factory=list)
    rejects: List[Reject] = Field(default_factory=list)
    units: int = 0


class CountMismatch(BaseModel):
    language: str
    expected: int
    observed: int


class CorpusStats(BaseModel):
    per_language: Dict[str, int] = Field(default_factory=dict)
    total: int = 0
    duplicates_removed: int = Field(default=0, ge=0)
    parse_failures: int = Field(default=0, ge=0)
    sources: Dict[str, int] = Field(default_factory=dict)
    unknown_languages: List[str] = Field(default_factory=list)
    mismatches: List[CountMismatch] = Field(default_factory=list)

    @model_validator(mode="after")
    def _consistent(self):
        if any(v < 0 for v in self.per_language.values()):
            raise ValueError("negative language count")
        if sum(self.per_language.values()) != self.total:
            raise ValueError("per-language counts must sum to the total")
        return self


class SourceSpec(BaseModel):
    path: str
    profile: str
    language: str
    source_id: str = ""


# ===========================================================================
# NORMALIZATION
# ===========================================================================

_WS = re.compile(r"\s+")
_MD_TOKEN = re.compile(r"\*\*|__|\*|`")


def _balance_markdown(text: str) -> str:
    """Drop the last occurrence of every emphasis marker with an odd count."""
    while True:
        tokens = [(m.start(), m.group()) for m in _MD_TOKEN.finditer(text)]
        counts = Counter(tok for _, tok in tokens)
        odd = {tok for tok, n in counts.items() if n % 2}
        if not odd:
            return text
        cut = []
        for tok in odd:
            pos = max(p for p, t in tokens if t == tok)
            cut.append((pos, len(tok)))
        for pos, length in sorted(cut, reverse=True):
            text = text[:pos] + text[pos + length:]


def _normalize_step(text: str) -> str:
    text = unicodedata.normalize("NFC", text)
    text = _balance_markdown(text)
    return _WS.sub(" ", text).strip()


def normalize_text(text: Optional[str]) -> Optional[str]:
    if text is None:
        return None
    prev = None
    while prev != text:
        prev, text = text, _normalize_step(text)
    return text


def make_entry_id(language: str, headword: str, first_gloss: str) -> str:
    key = "|".join([language, headword.casefold(), first_gloss.casefold()])
    return f"{language}-{hashlib.sha1(key.encode('utf-8')).hexdigest()[:12]}"


def detect_script(text: str) -> str:
    for ch in text:
        cp = ord(ch)
        if 0x1200 <= cp <= 0x139F or 0x2D80 <= cp <= 0x2DDF:
            return "Ethiopic"
        if 0x0600 <= cp <= 0x06FF or 0x0750 <= cp <= 0x077F:
            return "Arabic"
    return "Latin"


@lru_cache(maxsize=None)
def _inventory_scripts() -> Dict[str, str]:
    try:
        return {code: str(s) for code, s in load_language_inventory()["script"].items()}
    except (OSError, KeyError):
        return {}


def default_script(language: str, headword: str) -> str:
    """Inventory script for single-script languages, else detected from the headword."""
    script = _inventory_scripts().get(language, "")
    if script and "/" not in script:
        return script
    return detect_script(headword)


def normalize_entry(raw: DictEntry) -> DictEntry:
    headword = normalize_text(raw.headword) or ""
    if not headword:
        raise NormalizationError("empty headword")
    glosses = [g for g in (normalize_text(t) for t in raw.translations) if g]
    if not glosses:
        raise NormalizationError("empty gloss")

    optional = {}
    for field in ("part_of_speech", "example", "notes"):
        value = normalize_text(getattr(raw, field))
        optional[field] = value or None

    language = raw.language.strip().lower()
    return raw.model_copy(update={
        "headword": headword,
        "language": language,
        "translations": glosses,
        "entry_id": raw.entry_id or make_entry_id(language, headword, glosses[0]),
        "script": raw.script or default_script(language, headword),
        **optional,
    })


# ===========================================================================
# PROFILES
# ===========================================================================

Unit = Tuple[int, str, Union[Dict[str, object], ParseRejectError]]
PROFILES: Dict[str, Callable[[str], Iterator[Unit]]] = {}


def register_profile(name: str):
    def wrap(fn):
        PROFILES[name] = fn
        return fn
    return wrap


def _split_glosses(text: str) -> List[str]:
    return [g.strip() for g in text.split(";") if g.strip()]


_LINE_SEP = re.compile(r"\s*[—–]\s*|\s+-\s+")
_POS_SUFFIX = re.compile(r"^(.*?)\s*\(([^()]*)\)\s*$")


def _skippable(line: str) -> bool:
    s = line.strip()
    return not s or s.startswith("#")


@register_profile("line")
def _parse_line_profile(raw_text: str) -> Iterator[Unit]:
    """``headword [(pos)] — gloss1; gloss2`` one entry per line."""
    for lineno, line in enumerate(raw_text.splitlines(), start=1):
        if _skippable(line):
            continue
        parts = _LINE_SEP.split(line.strip(), maxsplit=1)
        if len(parts) < 2:
            yield lineno, line, ParseRejectError("missing separator", lineno, line)
            continue
        head, rest = parts[0].strip(), parts[1].strip(" —–")
        pos = None
        m = _POS_SUFFIX.match(head)
        if m:
            head, pos = m.group(1).strip(), m.group(2).strip() or None
        if not head:
            yield lineno, line, ParseRejectError("empty headword", lineno, line)
            continue
        glosses = _split_glosses(rest)
        if not glosses:
            yield lineno, line, ParseRejectError("empty gloss", lineno, line)
            continue
        yield lineno, line, {"headword": head, "translations": glosses, "part_of_speech": pos}


TSV_COLUMNS = ["headword", "translations", "part_of_speech", "example", "notes"]


@register_profile("tsv")
def _parse_tsv_profile(raw_text: str) -> Iterator[Unit]:
    first = True
    for lineno, line in enumerate(raw_text.splitlines(), start=1):
        if _skippable(line):
            continue
        cols = [c.strip() for c in line.rstrip("\n").split("\t")]
        if first:
            first = False
            if cols[0].lower() in ("headword", "word", "lemma"):
                continue
        if len(cols) < 2:
            yield lineno, line, ParseRejectError("missing separator", lineno, line)
            continue
        if len(cols) > len(TSV_COLUMNS):
            yield lineno, line, ParseRejectError("too many columns", lineno, line)
            continue
        row = dict(zip(TSV_COLUMNS, cols))
        if not row["headword"]:
            yield lineno, line, ParseRejectError("empty headword", lineno, line)
            continue
        glosses = _split_glosses(row["translations"])
        if not glosses:
            yield lineno, line, ParseRejectError("empty gloss", lineno, line)
            continue
        row["translations"] = glosses
        yield lineno, line, {k: (v or None) if k != "translations" else v for k, v in row.items()}


KV_KEYS = {
    "headword": "headword", "word": "headword", "lemma": "headword",
    "gloss": "translations", "glosses": "translations", "meaning": "translations",
    "translation": "translations", "translations": "translations", "english": "translations",
    "pos": "part_of_speech", "part of speech": "part_of_speech",
    "example": "example", "notes": "notes", "note": "notes",
    "verified": "verified", "language": "language",
}
_KV_LINE = re.compile(r"^\s*([A-Za-z][A-Za-z ]*?)\s*:\s*(.*)$")


def _blocks(raw_text: str) -> Iterator[Tuple[int, List[str]]]:
    start, buf = 0, []
    for lineno, line in enumerate(raw_text.splitlines(), start=1):
        if not line.strip():
            if buf:
                yield start, buf
            buf = []
            continue
        if line.lstrip().startswith("#") and not buf:
            continue
        if not buf:
            start = lineno
        buf.append(line)
    if buf:
        yield start, buf


@register_profile("kv")
def _parse_kv_profile(raw_text: str) -> Iterator[Unit]:
    """Blank-line separated ``Key: value`` blocks from OCR post-processing.

    Unkeyed lines continue the previous value (OCR line wrap).
    """
    for start, lines in _blocks(raw_text):
        text = "\n".join(lines)
        fields: Dict[str, str] = {}
        last = None
        bad = False
        for line in lines:
            m = _KV_LINE.match(line)
            key = KV_KEYS.get(m.group(1).strip().lower()) if m else None
            if key:
                fields[key] = m.group(2).strip()
                last = key
            elif last:
                fields[last] = f"{fields[last]} {line.strip()}"
            else:
                bad = True
                break
        if bad:
            yield start, text, ParseRejectError("malformed block", start, text)
            continue
        if not fields.get("headword"):
            yield start, text, ParseRejectError("empty headword", start, text)
            continue
        glosses = _split_glosses(fields.get("translations", ""))
        if not glosses:
            yield start, text, ParseRejectError("empty gloss", start, text)
            continue
        out: Dict[str, object] = {k: v for k, v in fields.items() if k not in ("translations", "verified")}
        out["translations"] = glosses
        out["verified"] = fields.get("verified", "").strip().lower() in ("yes", "true", "1", "y")
        yield start, text, out


def parse_source(raw_text: str, profile: str, language: str, source_id: str = "") -> ParseResult:
    """Parse one raw source. Every parseable unit lands in entries or rejects."""
    parser = PROFILES.get(profile)
    if parser is None:
        raise ConfigurationError(f"unknown parser profile '{profile}' (known: {', '.join(sorted(PROFILES))})")

    result = ParseResult()
    for lineno, text, fields in parser(raw_text):
        result.units += 1
        if isinstance(fields, ParseRejectError):
            result.rejects.append(Reject(source_id=source_id, line=lineno, reason=fields.reason, text=text))
            continue
        try:
            raw = DictEntry(language=fields.pop("language", None) or language, source_id=source_id, **fields)
            result.entries.append(normalize_entry(raw))
        except NormalizationError as e:
            result.rejects.append(Reject(source_id=source_id, line=lineno, reason=str(e), text=text))
        except ValidationError as e:
            result.rejects.append(Reject(source_id=source_id, line=lineno, reason=f"invalid entry: {e.errors()[0]['msg']}", text=text))

    logger.info("Parsed %s (%s): %d entries, %d rejects", source_id or "<text>", profile, len(result.entries), len(result.rejects))
    return result


# ===========================================================================
# DEDUPE / VALIDATE
# ===========================================================================


def dedupe_key(entry: DictEntry) -> Tuple[str, str, str]:
    return entry.language, entry.headword.casefold(), entry.first_gloss.casefold()


def _count(entries: List[DictEntry]) -> Tuple[Dict[str, int], Dict[str, int]]:
    per_language: Dict[str, int] = Counter(e.language for e in entries)
    sources: Dict[str, int] = Counter(e.source_id for e in entries)
    return dict(sorted(per_language.items())), dict(sorted(sources.items()))


def dedupe(entries: List[DictEntry]) -> Tuple[List[DictEntry], CorpusStats]:
    seen = set()
    kept: List[DictEntry] = []
    for e in entries:
        key = dedupe_key(e)
        if key in seen:
            continue
        seen.add(key)
        kept.append(e)

    per_language, sources = _count(kept)
    stats = CorpusStats(
        per_language=per_language,
        total=len(kept),
        duplicates_removed=len(entries) - len(kept),
        sources=sources,
    )
    if stats.duplicates_removed:
        logger.info("Removed %d duplicate entries", stats.duplicates_removed)
    return kept, stats


def compare_counts(observed: Dict[str, int], expected: Dict[str, int]) -> List[CountMismatch]:
    out = []
    for lang in sorted(set(observed) | set(expected)):
        o, e = observed.get(lang, 0), expected.get(lang, 0)
        if o != e:
            out.append(CountMismatch(language=lang, expected=e, observed=o))
    return out


def validate_corpus(
    entries: List[DictEntry],
    expected: Optional[Dict[str, int]] = None,
    languages: Optional[List[str]] = None,
    strict: bool = False,
    duplicates_removed: int = 0,
    parse_failures: int = 0,
) -> CorpusStats:
    allowed = set(languages or DEFAULT_LANGUAGES)
    per_language, sources = _count(entries)
    unknown = sorted(set(per_language) - allowed)
    if unknown:
        if strict:
            raise CorpusValidationError(f"unknown language codes: {', '.join(unknown)}")
        logger.warning("Corpus contains languages outside the configured set: %s", unknown)

    dup_ids = [i for i, n in Counter(e.entry_id for e in entries).items() if n > 1]
    if dup_ids:
        if strict:
            raise CorpusValidationError(f"{len(dup_ids)} entry ids are not unique, e.g. {dup_ids[0]}")
        logger.warning("%d entry ids are not unique", len(dup_ids))

    stats = CorpusStats(
        per_language=per_language,
        total=len(entries),
        duplicates_removed=duplicates_removed,
        parse_failures=parse_failures,
        sources=sources,
        unknown_languages=unknown,
    )
    if expected is not None:
        stats.mismatches = compare_counts(per_language, expected)
    return stats


# ===========================================================================
# REFERENCE DATA
# ===========================================================================


@lru_cache(maxsize=1)
def load_language_inventory() -> pd.DataFrame:
    path = os.path.join(REFERENCE_DIR, "language_inventory.csv")
    df = pd.read_csv(path, dtype={"suspect_columns": str}, keep_default_na=False)
    return df.set_index("code")


def expected_dictionary_counts() -> Dict[str, int]:
    inv = load_language_inventory()
    return {code: int(n) for code, n in inv["dictionary_entries"].items()}


# ===========================================================================
# FILE-LEVEL INGEST
# ===========================================================================


def ingest_sources(
    sources: List[SourceSpec],
    languages: Optional[List[str]] = None,
    strict: bool = False,
    expected: Optional[Dict[str, int]] = None,
) -> Tuple[List[DictEntry], CorpusStats, List[Reject]]:
    entries: List[DictEntry] = []
    rejects: List[Reject] = []
    for src in sources:
        try:
            with open(src.path, "r", encoding="utf-8") as f:
                raw = f.read()
        except OSError as e:
            raise DataError(f"cannot read source {src.path}: {e}") from e
        result = parse_source(raw, src.profile, src.language, src.source_id or os.path.basename(src.path))
        entries.extend(result.entries)
        rejects.extend(result.rejects)

    kept, dd = dedupe(entries)
    stats = validate_corpus(
        kept,
        expected=expected,
        languages=languages,
        strict=strict,
        duplicates_removed=dd.duplicates_removed,
        parse_failures=len(rejects),
    )
    return kept, stats, rejects


def write_corpus(out_dir: str, entries: List[DictEntry], stats: CorpusStats, rejects: List[Reject]) -> None:
    by_lang: Dict[str, List[DictEntry]] = {}
    for e in entries:
        by_lang.setdefault(e.language, []).append(e)
    for lang, rows in by_lang.items():
        write_jsonl(os.path.join(out_dir, f"{lang}.jsonl"), (e.model_dump(mode="json") for e in rows))
    write_json(os.path.join(out_dir, "stats.json"), stats.model_dump(mode="json"))
    write_jsonl(os.path.join(out_dir, "rejects.jsonl"), (r.model_dump(mode="json") for r in rejects))


def read_corpus(path: str) -> List[DictEntry]:
    """Read one corpus JSONL file or every ``<lang>.jsonl`` in a directory."""
    if os.path.isdir(path):
        files = sorted(
            os.path.join(path, name) for name in os.listdir(path)
            if name.endswith(".jsonl") and name != "rejects.jsonl"
        )
    else:
        files = [path]
    out: List[DictEntry] = []
    for fp in files:
        for lineno, obj in iter_jsonl(fp):
            try:
                out.append(DictEntry.model_validate(obj))
            except ValidationError as e:
                raise DataError(f"{fp}:{lineno}: not a dictionary entry ({e.errors()[0]['msg']})") from e
    return out
