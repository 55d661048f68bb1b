"""Event detection, non-entity argument extraction, and end-to-end runs."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from typing import Any, Mapping

from aee.codebook import (
    Codebook,
    EventInstance,
    render_event_type_menu,
    render_signature_schema,
    validate_instance,
)
from aee.corpus import Document
from aee.llm import ChatRequest, LLMGateway, extract_json
from aee.prompts import render_prompt
from aee.zest import Linker, StageError

logger = logging.getLogger(__name__)

_INT_STRING = re.compile(r"\s*\+?\d+\s*")


@dataclass
class DetectionResult:
    ranked_types: list[str]
    rationale: str = ""

    @property
    def top(self) -> str:
        return self.ranked_types[0]


@dataclass
class Prediction:
    doc_id: str
    event: EventInstance | None
    errors: list[dict[str, str]] = field(default_factory=list)
    trace_ref: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "doc_id": self.doc_id,
            "predicted": self.event.to_dict() if self.event else None,
            "errors": self.errors,
            "trace_ref": self.trace_ref,
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> Prediction:
        pred = raw.get("predicted")
        return cls(
            doc_id=raw["doc_id"],
            event=EventInstance.from_dict(pred) if pred else None,
            errors=list(raw.get("errors") or []),
            trace_ref=raw.get("trace_ref"),
        )


def parse_ranking(text: str, cb: Codebook) -> DetectionResult:
    """Read the final ``a > b > c`` line of a detection reply."""
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty detection reply")
    ranked_line = next((ln for ln in reversed(lines) if ">" in ln), lines[-1])
    rationale = "\n".join(ln for ln in lines if ln is not ranked_line)
    lookup = {t.casefold(): t for t in cb.type_names}
    ranked: list[str] = []
    for raw in ranked_line.split(">"):
        name = re.sub(r"^\[\d+\]\s*", "", raw.strip()).strip(" \t\"'`*.[]")
        t = lookup.get(name.casefold())
        if t is None:
            logger.warning("dropping unknown event type %r from ranking", name)
            continue
        if t not in ranked:
            ranked.append(t)
    if not ranked:
        raise ValueError(f"no known event types in ranking line {ranked_line!r}")
    return DetectionResult(ranked, rationale)


class Extractor:
    """Runs detection and argument extraction against one codebook."""

    def __init__(self, gateway: LLMGateway, cb: Codebook, *, model: str, linker: Linker | None = None):
        self.gateway = gateway
        self.cb = cb
        self.model = model
        self.linker = linker

    def detect_event(self, doc: Document) -> DetectionResult:
        system, user = render_prompt(
            "ed", article=doc.text, event_type_menu=render_event_type_menu(self.cb)
        )
        resp = self.gateway.chat(
            ChatRequest(self.model, system, user), parse=lambda t: parse_ranking(t, self.cb)
        )
        return resp.parsed

    def extract_arguments(self, doc: Document, event_type: str) -> dict[str, Any]:
        """Non-entity arguments for ``event_type``; unknowable optionals come back null."""
        sig = self.cb.signature(event_type)
        schema = render_signature_schema(self.cb, event_type, entity_fields=False)
        system, user = render_prompt(
            "eae", event_type=event_type, event_type_definition=sig.description, article=doc.text
        )
        count_roles = {f.name for f in sig.non_entity_fields if f.domain.kind == "integer"}

        def parse(text: str) -> dict[str, Any]:
            value = extract_json(text)
            if not isinstance(value, dict):
                raise ValueError("expected a JSON object of arguments")
            for role in count_roles:
                v = value.get(role)
                if isinstance(v, str) and _INT_STRING.fullmatch(v):
                    value[role] = int(v)
            return value

        resp = self.gateway.chat(
            ChatRequest(self.model, system, user, output_schema=schema), parse=parse
        )
        args = dict(resp.parsed)
        for f in sig.non_entity_fields:
            args.setdefault(f.name, None)
        return args

    def link_entities(self, doc: Document, event_type: str) -> tuple[dict[str, list[str]], dict[str, Any]]:
        if self.linker is None:
            raise RuntimeError("no entity linker configured")
        result = self.linker.run(doc, event_type, self.cb)
        return result.assignment, result.trace

    # -- batch-facing drivers: never raise, record errors instead -------------

    def _finish(self, pred: Prediction) -> Prediction:
        if pred.event is not None:
            problems = validate_instance(self.cb, pred.event)
            if problems:
                pred.errors.append(
                    {"stage": "validate", "message": "; ".join(str(p) for p in problems)}
                )
                pred.event = None
        return pred

    def run_detect(self, doc: Document) -> Prediction:
        try:
            det = self.detect_event(doc)
        except Exception as exc:
            return Prediction(doc.doc_id, None, [_error("detect", exc)])
        return Prediction(doc.doc_id, EventInstance(det.top, {}))

    def run_arguments(self, doc: Document, event_type: str) -> Prediction:
        try:
            args = self.extract_arguments(doc, event_type)
        except Exception as exc:
            return Prediction(doc.doc_id, None, [_error("arguments", exc)])
        return Prediction(doc.doc_id, EventInstance(event_type, args))

    def run_link(self, doc: Document, event_type: str) -> tuple[Prediction, dict[str, Any] | None]:
        try:
            assignment, trace = self.link_entities(doc, event_type)
        except Exception as exc:
            return Prediction(doc.doc_id, None, [_error("link", exc)]), None
        return Prediction(doc.doc_id, EventInstance(event_type, assignment)), trace

    def run_e2e(self, doc: Document, gold_type: str | None = None) -> tuple[Prediction, dict[str, Any] | None]:
        """Detect (unless ``gold_type`` is given), then extract and link on that type."""
        errors: list[dict[str, str]] = []
        if gold_type is None:
            try:
                event_type = self.detect_event(doc).top
            except Exception as exc:
                return Prediction(doc.doc_id, None, [_error("detect", exc)]), None
        else:
            event_type = gold_type
        sig = self.cb.signature(event_type)
        arguments: dict[str, Any] = {}
        try:
            arguments.update(self.extract_arguments(doc, event_type))
        except Exception as exc:
            errors.append(_error("arguments", exc))
        trace = None
        if sig.entity_fields:
            try:
                assignment, trace = self.link_entities(doc, event_type)
                arguments.update(assignment)
            except Exception as exc:
                errors.append(_error("link", exc))
        if errors:
            return Prediction(doc.doc_id, None, errors), trace
        return self._finish(Prediction(doc.doc_id, EventInstance(event_type, arguments))), trace


def _error(stage: str, exc: BaseException) -> dict[str, str]:
    if isinstance(exc, StageError):
        stage = f"{stage}.{exc.stage}"
        exc = exc.cause
    logger.warning("%s failed: %s", stage, exc)
    return {"stage": stage, "type": type(exc).__name__, "message": str(exc)}


def prediction_lines(preds: list[Prediction]) -> str:
    return "".join(json.dumps(p.to_dict(), ensure_ascii=False) + "\n" for p in preds)
