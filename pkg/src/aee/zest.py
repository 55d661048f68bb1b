"""Zero-shot abstractive entity linking in three stages.

1. The model writes hypothetical descriptions of every entity it thinks is
   involved; each one is a dense-retrieval query against the entity index.
2. Each retrieved candidate is checked for supporting evidence in the article.
3. Supported entities are assigned to the event type's entity roles.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

from aee.codebook import Codebook
from aee.corpus import Document
from aee.entity_db import Embedder, Entity, EntityIndex, retrieve
from aee.llm import ChatRequest, LLMGateway, extract_json
from aee.prompts import render_prompt

logger = logging.getLogger(__name__)

K_PER_QUERY = 16
MAX_CANDIDATES = 64
MAX_QUERIES = 20

FILTER_SCHEMA: dict[str, Any] = {
    "type": "object",
    "properties": {
        "entity_spans": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "entity_name": {"type": "string"},
                    "span": {"type": ["string", "null"]},
                    "explanation": {"type": "string"},
                },
                "required": ["entity_name", "span", "explanation"],
                "additionalProperties": False,
            },
        }
    },
    "required": ["entity_spans"],
    "additionalProperties": False,
}


class StageError(RuntimeError):
    """A linker stage failed; ``stage`` names which one."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"{stage}: {cause}")


@dataclass(frozen=True)
class Query:
    name: str
    description: str

    @property
    def text(self) -> str:
        return f"{self.name}: {self.description}"


@dataclass
class CandidateSet:
    queries: list[Query]
    retrieved: list[str]
    scores: dict[str, float]
    provenance: dict[str, list[int]]

    def to_dict(self) -> dict[str, Any]:
        return {
            "queries": [{"name": q.name, "description": q.description} for q in self.queries],
            "retrieved": [
                {"entity_id": eid, "score": self.scores[eid], "queries": self.provenance[eid]}
                for eid in self.retrieved
            ],
        }


@dataclass(frozen=True)
class EvidenceJudgment:
    entity_id: str
    supported: bool
    evidence_span: str | None = None
    explanation: str = ""

    def __post_init__(self) -> None:
        if self.supported and not self.evidence_span:
            raise ValueError("a supported judgment needs an evidence span")


@dataclass
class ZestResult:
    assignment: dict[str, list[str]]
    trace: dict[str, Any] = field(default_factory=dict)


class Linker:
    """Bundles the models, index, and entity records the three stages share."""

    def __init__(
        self,
        gateway: LLMGateway,
        index: EntityIndex,
        embedder: Embedder,
        entities: Sequence[Entity],
        *,
        model: str,
        k_per_query: int = K_PER_QUERY,
        max_candidates: int = MAX_CANDIDATES,
        max_queries: int = MAX_QUERIES,
        batch_filter: bool = True,
    ):
        self.gateway = gateway
        self.index = index
        self.embedder = embedder
        self.entities = {e.entity_id: e for e in entities}
        missing = [eid for eid in index.entity_ids if eid not in self.entities]
        if missing:
            raise ValueError(f"index has {len(missing)} ids without entity records, e.g. {missing[0]!r}")
        self.model = model
        self.k_per_query = k_per_query
        self.max_candidates = max_candidates
        self.max_queries = max_queries
        self.batch_filter = batch_filter

    # -- stage 1 --------------------------------------------------------------

    def generate_queries(self, doc: Document) -> list[Query]:
        if not doc.text.strip():
            raise ValueError("document text is empty")
        system, user = render_prompt("zest_queries", article=doc.text)
        resp = self.gateway.chat(ChatRequest(self.model, system, user), parse=parse_entity_list)
        queries = resp.parsed
        if len(queries) > self.max_queries:
            logger.warning(
                "%s: %d queries generated, keeping the first %d",
                doc.doc_id, len(queries), self.max_queries,
            )
            queries = queries[: self.max_queries]
        return queries

    def gather_candidates(self, queries: Sequence[Query]) -> CandidateSet:
        best: dict[str, float] = {}
        prov: dict[str, list[int]] = {}
        for qi, q in enumerate(queries):
            for eid, score in retrieve(self.index, q.text, self.k_per_query, self.embedder):
                if eid not in best or score > best[eid]:
                    best[eid] = score
                prov.setdefault(eid, []).append(qi)
        ranked = sorted(best, key=lambda eid: (-best[eid], eid))[: self.max_candidates]
        return CandidateSet(
            queries=list(queries),
            retrieved=ranked,
            scores={eid: best[eid] for eid in ranked},
            provenance={eid: prov[eid] for eid in ranked},
        )

    # -- stage 2 --------------------------------------------------------------

    def filter_candidates(self, doc: Document, candidate_ids: Sequence[str]) -> list[EvidenceJudgment]:
        if not candidate_ids:
            return []
        ents = [self.entities[eid] for eid in candidate_ids]
        if self.batch_filter:
            spans = self._judge(doc, ents)
        else:
            spans = {}
            for e in ents:
                spans.update(self._judge(doc, [e]))
        judgments = []
        for e in ents:
            span, why = spans.get(e.name.casefold(), (None, "no judgment returned"))
            judgments.append(
                EvidenceJudgment(e.entity_id, bool(span), span or None, why)
            )
        return judgments

    def _judge(self, doc: Document, ents: Sequence[Entity]) -> dict[str, tuple[str | None, str]]:
        system, user = render_prompt(
            "zest_filter",
            country=doc.country,
            article=doc.text,
            entities=[{"name": e.name, "description": e.description} for e in ents],
        )
        req = ChatRequest(self.model, system, user, output_schema=json.dumps(FILTER_SCHEMA))
        parsed = self.gateway.chat(req).parsed
        out: dict[str, tuple[str | None, str]] = {}
        for row in parsed["entity_spans"]:
            key = row["entity_name"].strip().casefold()
            span = (row.get("span") or "").strip() or None
            # several rows for one entity: any supported row wins
            if key not in out or (span and not out[key][0]):
                out[key] = (span, row.get("explanation", ""))
        return out

    # -- stage 3 --------------------------------------------------------------

    def assign_roles(
        self, doc: Document, event_type: str, entity_ids: Sequence[str], cb: Codebook
    ) -> dict[str, list[str]]:
        sig = cb.signature(event_type)
        roles = [f.name for f in sig.entity_fields]
        assignment: dict[str, list[str]] = {r: [] for r in roles}
        if not roles or not entity_ids:
            return assignment
        ents = [self.entities[eid] for eid in entity_ids]
        system, user = render_prompt(
            "zest_assign",
            event_type=event_type,
            event_type_definition=sig.description,
            possible_fields="\n".join(f"- {f.name}: {f.description}" for f in sig.entity_fields),
            article=doc.text,
            event_with_empty_entities=f"{event_type}({', '.join(f'{r}=[]' for r in roles)})",
            entities=[{"name": e.name, "description": e.description} for e in ents],
        )
        schema = {
            "type": "object",
            "properties": {r: {"type": "array", "items": {"type": "string"}} for r in roles},
            "required": roles,
            "additionalProperties": False,
        }
        parsed = self.gateway.chat(
            ChatRequest(self.model, system, user, output_schema=json.dumps(schema))
        ).parsed
        return resolve_assignment(parsed, roles, ents, doc_id=doc.doc_id)

    # -- composition ----------------------------------------------------------

    def run(self, doc: Document, event_type: str, cb: Codebook) -> ZestResult:
        sig = cb.signature(event_type)
        roles = [f.name for f in sig.entity_fields]
        trace: dict[str, Any] = {"doc_id": doc.doc_id, "event_type": event_type}
        if not roles:
            trace.update(stage1=None, stage2=[], stage3={})
            return ZestResult({}, trace)
        try:
            queries = self.generate_queries(doc)
            candidates = self.gather_candidates(queries)
        except Exception as exc:
            raise StageError("stage1", exc) from exc
        trace["stage1"] = candidates.to_dict()
        empty = {r: [] for r in roles}
        if not candidates.retrieved:
            trace.update(stage2=[], stage3=empty)
            return ZestResult(empty, trace)
        try:
            judgments = self.filter_candidates(doc, candidates.retrieved)
        except Exception as exc:
            raise StageError("stage2", exc) from exc
        trace["stage2"] = [
            {
                "entity_id": j.entity_id,
                "supported": j.supported,
                "evidence_span": j.evidence_span,
                "explanation": j.explanation,
            }
            for j in judgments
        ]
        kept = [j.entity_id for j in judgments if j.supported]
        try:
            assignment = self.assign_roles(doc, event_type, kept, cb)
        except Exception as exc:
            raise StageError("stage3", exc) from exc
        trace["stage3"] = assignment
        return ZestResult(assignment, trace)


_ENTITY_LIST = re.compile(r"<entity_list>(.*?)</entity_list>", re.DOTALL)


def parse_entity_list(text: str) -> list[Query]:
    """Read the ``<entity_list>`` JSON object (name -> description) from a stage-1 reply."""
    blocks = _ENTITY_LIST.findall(text)
    if not blocks:
        raise ValueError("reply has no <entity_list> block")
    data = extract_json(blocks[-1])
    if not isinstance(data, Mapping):
        raise ValueError("<entity_list> must hold a JSON object")
    queries = []
    for name, desc in data.items():
        if not isinstance(desc, str):
            raise ValueError(f"description for {name!r} is not a string")
        name = name.strip()
        if name:
            queries.append(Query(name, desc.strip()))
    return queries


def resolve_assignment(
    parsed: Mapping[str, Sequence[str]],
    roles: Sequence[str],
    ents: Sequence[Entity],
    *,
    doc_id: str = "",
) -> dict[str, list[str]]:
    """Map entity names back to ids; unknown names are dropped, first role wins."""
    by_name: dict[str, str] = {}
    for e in ents:
        by_name.setdefault(e.name.strip().casefold(), e.entity_id)
    assignment: dict[str, list[str]] = {r: [] for r in roles}
    placed: dict[str, str] = {}
    for role in roles:
        for name in parsed.get(role, []):
            eid = by_name.get(name.strip().casefold())
            if eid is None:
                logger.warning("%s: dropping unknown entity name %r in %s", doc_id, name, role)
                continue
            if eid in placed:
                if placed[eid] != role:
                    logger.warning(
                        "%s: %r already assigned to %s; ignoring %s", doc_id, name, placed[eid], role
                    )
                continue
            placed[eid] = role
            assignment[role].append(eid)
    return assignment
