"""Gold corpus ingestion, split handling, and diversity statistics."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path
from typing import Any, Iterable, Sequence

from aee.codebook import Codebook, EventInstance, validate_instance

logger = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")

# Reference language set, largest first.
KNOWN_LANGUAGES = (
    "en", "es", "ar", "fr", "it", "ru", "de", "tr", "my", "id",
    "uk", "ko", "pt", "nl", "so", "ne", "zh", "fa", "he", "ja",
)


class CorpusError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class Document:
    doc_id: str
    language: str
    country: str
    text: str
    split: str = "test"


@dataclass
class GoldRecord:
    document: Document
    gold: EventInstance

    @property
    def doc_id(self) -> str:
        return self.document.doc_id

    def to_dict(self) -> dict[str, Any]:
        d = self.document
        return {
            "doc_id": d.doc_id,
            "language": d.language,
            "country": d.country,
            "text": d.text,
            "split": d.split,
            "gold": self.gold.to_dict(),
        }


@dataclass(frozen=True)
class Rejection:
    line: int
    reason: str


def document_from_dict(raw: dict[str, Any]) -> Document:
    for key in ("doc_id", "language", "text"):
        if not isinstance(raw.get(key), str):
            raise ValueError(f"missing or non-string {key!r}")
    if not raw["text"].strip():
        raise ValueError("empty text")
    split = raw.get("split", "test")
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    return Document(
        doc_id=raw["doc_id"],
        language=raw["language"],
        country=raw.get("country") or "",
        text=raw["text"],
        split=split,
    )


def read_corpus(path: str | Path, cb: Codebook) -> tuple[list[GoldRecord], list[Rejection]]:
    """Parse a corpus JSONL file, separating valid records from rejected lines."""
    records: list[GoldRecord] = []
    rejected: list[Rejection] = []
    seen: set[str] = set()
    odd_languages: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                doc = document_from_dict(raw)
                gold = EventInstance.from_dict(raw.get("gold"))
            except (json.JSONDecodeError, ValueError, TypeError) as exc:
                rejected.append(Rejection(lineno, f"malformed record: {exc}"))
                continue
            if doc.doc_id in seen:
                rejected.append(Rejection(lineno, f"duplicate doc_id {doc.doc_id!r}"))
                continue
            violations = validate_instance(cb, gold)
            if violations:
                why = "; ".join(str(v) for v in violations)
                rejected.append(Rejection(lineno, f"invalid gold event: {why}"))
                continue
            if doc.language not in KNOWN_LANGUAGES:
                odd_languages.add(doc.language)
            seen.add(doc.doc_id)
            records.append(GoldRecord(doc, gold))
    for lang in sorted(odd_languages):
        logger.warning("language code %r is not in the reference language set", lang)
    return records, rejected


def load_corpus(path: str | Path, cb: Codebook, *, strict: bool = False) -> list[GoldRecord]:
    records, rejected = read_corpus(path, cb)
    if rejected and strict:
        first = rejected[0]
        raise CorpusError(first.reason, first.line)
    for r in rejected:
        logger.warning("%s:%d rejected: %s", path, r.line, r.reason)
    return records


def write_corpus(records: Iterable[GoldRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


def hill_number(counts: Sequence[int]) -> float:
    """Effective number of categories at order 1: exp of the Shannon entropy (nats)."""
    if any(c < 0 for c in counts):
        raise ValueError("counts must be nonnegative")
    total = sum(counts)
    if total <= 0:
        raise ValueError("hill_number needs at least one positive count")
    entropy = 0.0
    for c in counts:
        if c:
            p = c / total
            entropy -= p * math.log(p)
    return math.exp(entropy)


def round_report(x: float, places: int = 1) -> float:
    """Round half-to-even at ``places`` decimals, on the decimal repr of ``x``."""
    q = Decimal(1).scaleb(-places)
    return float(Decimal(repr(x)).quantize(q, rounding=ROUND_HALF_EVEN))


@dataclass
class CorpusStats:
    total: int
    per_language: dict[str, int]
    per_type: dict[str, int]
    per_language_split: dict[str, dict[str, int]]
    hill_overall: float
    hill_per_language: dict[str, float]
    hill_per_split: dict[str, float] = field(default_factory=dict)

    def to_dict(self, rounded: bool = False) -> dict[str, Any]:
        r = round_report if rounded else (lambda x: x)
        return {
            "total": self.total,
            "per_language": self.per_language,
            "per_type": self.per_type,
            "per_language_split": self.per_language_split,
            "hill_number": {
                "overall": r(self.hill_overall),
                "per_language": {k: r(v) for k, v in self.hill_per_language.items()},
                "per_split": {k: r(v) for k, v in self.hill_per_split.items()},
            },
        }


def corpus_stats(records: Sequence[GoldRecord]) -> CorpusStats:
    if not records:
        raise ValueError("corpus_stats needs a non-empty corpus")
    by_lang: dict[str, Counter[str]] = {}
    by_split: dict[str, Counter[str]] = {}
    lang_split: dict[str, Counter[str]] = {}
    overall: Counter[str] = Counter()
    for r in records:
        lang, t, split = r.document.language, r.gold.event_type, r.document.split
        by_lang.setdefault(lang, Counter())[t] += 1
        by_split.setdefault(split, Counter())[t] += 1
        lang_split.setdefault(lang, Counter())[split] += 1
        overall[t] += 1
    languages = sorted(by_lang)
    return CorpusStats(
        total=len(records),
        per_language={lang: sum(by_lang[lang].values()) for lang in languages},
        per_type=dict(sorted(overall.items())),
        per_language_split={lang: dict(sorted(lang_split[lang].items())) for lang in languages},
        hill_overall=hill_number(list(overall.values())),
        hill_per_language={lang: hill_number(list(by_lang[lang].values())) for lang in languages},
        hill_per_split={s: hill_number(list(c.values())) for s, c in sorted(by_split.items())},
    )


def majority_class(records: Sequence[GoldRecord], language: str, cb: Codebook) -> str:
    """Most frequent gold type among ``language``'s train records.

    Ties go to the type listed first in the codebook. A language with no
    train records falls back to the overall train majority with a warning.
    """
    train = [r for r in records if r.document.split == "train"]
    if not train:
        raise ValueError("no train records")
    pool = [r for r in train if r.document.language == language]
    if not pool:
        logger.warning("language %r unseen in train; using overall majority", language)
        pool = train
    counts = Counter(r.gold.event_type for r in pool)
    return min(counts, key=lambda t: (-counts[t], cb.order(t)))


def check_disjoint_splits(records: Iterable[GoldRecord]) -> None:
    where: dict[str, str] = {}
    for r in records:
        prev = where.setdefault(r.doc_id, r.document.split)
        if prev != r.document.split:
            raise CorpusError(f"doc_id {r.doc_id!r} appears in both {prev} and {r.document.split}")
