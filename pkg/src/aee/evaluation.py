"""Exact-match micro-averaged scoring for ED, AEAE, AEL, and end-to-end runs.

Each event becomes a set of ``(role, key)`` pairs. Null values are left out
on both sides, entity lists contribute one pair per distinct id, and
locations are keyed by their normalized place. Counts are pooled across
documents before precision, recall, and F1 are computed.
"""

from __future__ import annotations

import csv
import io
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

from aee.codebook import Codebook, EventInstance
from aee.corpus import GoldRecord
from aee.entity_db import Entity
from aee.geonorm import NominatimGeocoder, normalize_location

logger = logging.getLogger(__name__)

Pair = tuple[str, str]
LocationKey = Callable[[Mapping[str, str]], str]
TASKS = ("ed", "aeae", "ael", "e2e")


class ScoringError(ValueError):
    pass


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def add(self, gold: frozenset, pred: frozenset) -> None:
        hit = len(gold & pred)
        self.tp += hit
        self.fp += len(pred) - hit
        self.fn += len(gold) - hit

    def __iadd__(self, other: Counts) -> Counts:
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        return self

    @property
    def precision(self) -> float:
        d = self.tp + self.fp
        return self.tp / d if d else 0.0

    @property
    def recall(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    @property
    def zero_division(self) -> bool:
        return self.tp + self.fp == 0 or self.tp + self.fn == 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }


@dataclass
class ScoreReport:
    task: str
    overall: Counts
    by_language: dict[str, Counts] = field(default_factory=dict)
    by_subset: dict[str, Counts] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        flagged = [name for name, c in self._all() if c.zero_division]
        return {
            "task": self.task,
            "overall": self.overall.to_dict(),
            "by_language": {k: v.to_dict() for k, v in sorted(self.by_language.items())},
            "by_subset": {k: v.to_dict() for k, v in self.by_subset.items()},
            "meta": {**self.meta, "zero_division": flagged},
        }

    def _all(self) -> Iterable[tuple[str, Counts]]:
        yield "overall", self.overall
        for k, v in self.by_language.items():
            yield f"language:{k}", v
        for k, v in self.by_subset.items():
            yield f"subset:{k}", v

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", "group", "tp", "fp", "fn", "precision", "recall", "f1"])
        for name, c in self._all():
            w.writerow([self.task, name, c.tp, c.fp, c.fn, f"{c.precision:.6f}", f"{c.recall:.6f}", f"{c.f1:.6f}"])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# Canonical pairs
# ---------------------------------------------------------------------------


def string_location_key(loc: Mapping[str, str]) -> str:
    """Fallback key used when no geocoder is available: case-folded country + address."""
    return f"unresolved:{loc.get('country', '').casefold()}|{loc.get('address', '').casefold()}"


class GeoLocationKey:
    """Location key backed by a geocoder; counts how many lookups fell back."""

    def __init__(self, geocoder: NominatimGeocoder):
        self.geocoder = geocoder
        self.unresolved = 0
        self.lookups = 0
        self._memo: dict[tuple[str, str], str] = {}

    def __call__(self, loc: Mapping[str, str]) -> str:
        k = (loc.get("country", ""), loc.get("address", ""))
        if k not in self._memo:
            self.lookups += 1
            try:
                norm = normalize_location(loc, self.geocoder)
            except ValueError:
                self.unresolved += 1
                self._memo[k] = string_location_key(loc)
            else:
                if not norm.resolved:
                    self.unresolved += 1
                self._memo[k] = norm.key
        return self._memo[k]


def _text_key(value: str, case_sensitive: bool) -> str:
    out = " ".join(value.split())
    return out if case_sensitive else out.casefold()


def canonical_pairs(
    ev: EventInstance | None,
    cb: Codebook,
    which: str = "all",
    *,
    location_key: LocationKey = string_location_key,
    case_sensitive_text: bool = True,
) -> frozenset[Pair]:
    if which not in ("non_entity", "entity", "all"):
        raise ValueError(f"unknown pair selection {which!r}")
    if ev is None or ev.event_type not in cb:
        return frozenset()
    sig = cb.signature(ev.event_type)
    pairs: set[Pair] = set()
    for f in sig.fields:
        if which == "entity" and not f.is_entity_field:
            continue
        if which == "non_entity" and f.is_entity_field:
            continue
        value = ev.arguments.get(f.name)
        if value is None:
            continue
        kind = f.domain.kind
        if kind in ("entity_set", "categorical_set"):
            if len(set(value)) != len(value):
                logger.warning("%s.%s: duplicate entries collapsed", ev.event_type, f.name)
            pairs.update((f.name, str(v)) for v in value)
        elif kind == "boolean":
            pairs.add((f.name, "true" if value else "false"))
        elif kind == "integer":
            pairs.add((f.name, str(int(value))))
        elif kind == "text":
            pairs.add((f.name, _text_key(value, case_sensitive_text)))
        elif kind == "location":
            pairs.add((f.name, location_key(value)))
        else:
            pairs.add((f.name, str(value)))
    return frozenset(pairs)


# ---------------------------------------------------------------------------
# Alignment
# ---------------------------------------------------------------------------


def align(
    golds: Sequence[GoldRecord], preds: Mapping[str, EventInstance | None] | Iterable[tuple[str, EventInstance | None]]
) -> list[tuple[GoldRecord, EventInstance | None]]:
    gold_ids = [g.doc_id for g in golds]
    if len(set(gold_ids)) != len(gold_ids):
        raise ScoringError("duplicate doc_ids in gold")
    if isinstance(preds, Mapping):
        items = list(preds.items())
    else:
        items = list(preds)
    pred_map: dict[str, EventInstance | None] = {}
    for doc_id, ev in items:
        if doc_id in pred_map:
            raise ScoringError(f"duplicate doc_id {doc_id!r} in predictions")
        pred_map[doc_id] = ev
    extra = set(pred_map) - set(gold_ids)
    if extra:
        raise ScoringError(f"predictions for unknown doc_ids: {sorted(extra)[:5]}")
    return [(g, pred_map.get(g.doc_id)) for g in golds]


def _meta(cb: Codebook, location_key: LocationKey) -> dict[str, Any]:
    meta: dict[str, Any] = {"codebook_version": cb.version}
    if isinstance(location_key, GeoLocationKey):
        meta["geonorm_cache_version"] = location_key.geocoder.cache.version
        meta["unresolved_locations"] = location_key.unresolved
        meta["location_lookups"] = location_key.lookups
    else:
        meta["geonorm_cache_version"] = None
    return meta


# ---------------------------------------------------------------------------
# Scorers
# ---------------------------------------------------------------------------


def score_ed(
    golds: Sequence[GoldRecord], preds: Mapping[str, EventInstance | None], cb: Codebook | None = None
) -> ScoreReport:
    overall = Counts()
    by_lang: dict[str, Counts] = defaultdict(Counts)
    for g, p in align(golds, preds):
        gold = frozenset({g.gold.event_type})
        pred = frozenset({p.event_type}) if p is not None else frozenset()
        c = Counts()
        c.add(gold, pred)
        overall += c
        by_lang[g.document.language] += c
    meta = {"codebook_version": cb.version} if cb else {}
    return ScoreReport("ed", overall, dict(by_lang), meta=meta)


def score_aeae(
    golds: Sequence[GoldRecord],
    preds: Mapping[str, EventInstance | None],
    cb: Codebook,
    *,
    use_gold_type: bool = True,
    location_key: LocationKey = string_location_key,
    case_sensitive_text: bool = True,
) -> ScoreReport:
    overall = Counts()
    by_lang: dict[str, Counts] = defaultdict(Counts)
    for g, p in align(golds, preds):
        if use_gold_type and p is not None and p.event_type != g.gold.event_type:
            raise ScoringError(f"{g.doc_id}: gold-type mode but predicted type {p.event_type!r}")
        opts = dict(location_key=location_key, case_sensitive_text=case_sensitive_text)
        c = Counts()
        c.add(canonical_pairs(g.gold, cb, "non_entity", **opts), canonical_pairs(p, cb, "non_entity", **opts))
        overall += c
        by_lang[g.document.language] += c
    meta = _meta(cb, location_key)
    meta["use_gold_type"] = use_gold_type
    return ScoreReport("aeae", overall, dict(by_lang), meta=meta)


@dataclass(frozen=True)
class EntitySubsets:
    """Entity ids grouped for the AEL breakdown rows."""

    seen: frozenset[str] = frozenset()
    generic: frozenset[str] = frozenset()
    specific: frozenset[str] = frozenset()

    @classmethod
    def build(cls, golds: Iterable[GoldRecord], cb: Codebook, entities: Iterable[Entity] = ()) -> EntitySubsets:
        seen: set[str] = set()
        for g in golds:
            if g.document.split == "train":
                seen.update(v for _, v in canonical_pairs(g.gold, cb, "entity"))
        generic, specific = set(), set()
        for e in entities:
            if e.first_seen_split == "train":
                seen.add(e.entity_id)
            if e.generic is True:
                generic.add(e.entity_id)
            elif e.generic is False:
                specific.add(e.entity_id)
        return cls(frozenset(seen), frozenset(generic), frozenset(specific))


def score_ael(
    golds: Sequence[GoldRecord],
    preds: Mapping[str, EventInstance | None],
    cb: Codebook,
    *,
    use_gold_type: bool = True,
    subsets: EntitySubsets | None = None,
    known_ids: frozenset[str] | set[str] | None = None,
) -> ScoreReport:
    overall = Counts()
    by_lang: dict[str, Counts] = defaultdict(Counts)
    groups: dict[str, Callable[[str], bool]] = {}
    if subsets is not None:
        groups = {
            "seen": lambda e: e in subsets.seen,
            "unseen": lambda e: e not in subsets.seen,
            "generic": lambda e: e in subsets.generic,
            "specific": lambda e: e in subsets.specific,
        }
    by_subset: dict[str, Counts] = {name: Counts() for name in groups}
    for g, p in align(golds, preds):
        if use_gold_type and p is not None and p.event_type != g.gold.event_type:
            raise ScoringError(f"{g.doc_id}: gold-type mode but predicted type {p.event_type!r}")
        gold = canonical_pairs(g.gold, cb, "entity")
        pred = canonical_pairs(p, cb, "entity")
        if known_ids is not None:
            unknown = sorted(v for _, v in gold if v not in known_ids)
            if unknown:
                raise ScoringError(f"{g.doc_id}: gold uses unknown entity ids {unknown[:3]}")
        c = Counts()
        c.add(gold, pred)
        overall += c
        by_lang[g.document.language] += c
        for name, keep in groups.items():
            by_subset[name].add(
                frozenset(x for x in gold if keep(x[1])), frozenset(x for x in pred if keep(x[1]))
            )
    meta = {"codebook_version": cb.version, "use_gold_type": use_gold_type}
    return ScoreReport("ael", overall, dict(by_lang), by_subset, meta)


def score_e2e(
    golds: Sequence[GoldRecord],
    preds: Mapping[str, EventInstance | None],
    cb: Codebook,
    *,
    location_key: LocationKey = string_location_key,
    case_sensitive_text: bool = True,
) -> ScoreReport:
    """A wrong event type turns every predicted pair into a false positive and
    every gold pair into a false negative."""
    overall = Counts()
    by_lang: dict[str, Counts] = defaultdict(Counts)
    country_hits = country_total = 0
    opts = dict(location_key=location_key, case_sensitive_text=case_sensitive_text)
    for g, p in align(golds, preds):
        gold = canonical_pairs(g.gold, cb, "all", **opts)
        pred = canonical_pairs(p, cb, "all", **opts)
        c = Counts()
        if p is None or p.event_type != g.gold.event_type:
            c.fp, c.fn = len(pred), len(gold)
        else:
            c.add(gold, pred)
            hits, total = _country_agreement(g.gold, p, cb)
            country_hits += hits
            country_total += total
        overall += c
        by_lang[g.document.language] += c
    meta = _meta(cb, location_key)
    meta["country_match_rate"] = country_hits / country_total if country_total else None
    return ScoreReport("e2e", overall, dict(by_lang), meta=meta)


def _country_agreement(gold: EventInstance, pred: EventInstance, cb: Codebook) -> tuple[int, int]:
    hits = total = 0
    for f in cb.signature(gold.event_type).fields:
        if f.domain.kind != "location":
            continue
        a, b = gold.arguments.get(f.name), pred.arguments.get(f.name)
        if a is None or b is None:
            continue
        total += 1
        hits += a.get("country", "").casefold() == b.get("country", "").casefold()
    return hits, total
