"""Event ontology: loading, validation, and rendering of the codebook.

A codebook is a set of concrete event signatures. Each signature is an
ordered list of argument fields, and every field carries a typed domain.
Abstract groups in the file only share fields with their children and are
flattened away at load time.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

logger = logging.getLogger(__name__)

KINDS = (
    "boolean",
    "integer",
    "text",
    "categorical",
    "categorical_set",
    "entity_set",
    "location",
)
OPTION_KINDS = frozenset({"categorical", "categorical_set"})

DEFAULT_CODEBOOK = "event_codebook.json"


class CodebookError(ValueError):
    """Raised when a codebook file is malformed or inconsistent."""


@dataclass(frozen=True)
class ArgumentDomain:
    kind: str
    options: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise CodebookError(f"unknown domain kind {self.kind!r}")
        if self.kind in OPTION_KINDS and not self.options:
            raise CodebookError(f"{self.kind} domain needs at least one option")
        if self.kind not in OPTION_KINDS and self.options:
            raise CodebookError(f"{self.kind} domain takes no options")
        if len(set(self.options)) != len(self.options):
            raise CodebookError("duplicate category labels in domain")


@dataclass(frozen=True)
class ArgumentField:
    name: str
    description: str
    domain: ArgumentDomain
    is_entity_field: bool = False
    nullable: bool = False

    def __post_init__(self) -> None:
        if self.is_entity_field != (self.domain.kind == "entity_set"):
            raise CodebookError(
                f"field {self.name!r}: is_entity_field must be set exactly for entity_set domains"
            )


@dataclass(frozen=True)
class EventSignature:
    type_name: str
    description: str
    fields: tuple[ArgumentField, ...]
    parent: str | None = None

    def field(self, name: str) -> ArgumentField:
        for f in self.fields:
            if f.name == name:
                return f
        raise KeyError(name)

    @property
    def role_names(self) -> list[str]:
        return [f.name for f in self.fields]

    @property
    def entity_fields(self) -> list[ArgumentField]:
        return [f for f in self.fields if f.is_entity_field]

    @property
    def non_entity_fields(self) -> list[ArgumentField]:
        return [f for f in self.fields if not f.is_entity_field]


@dataclass(frozen=True)
class EventGroup:
    """Abstract grouping of event types; contributes shared leading fields."""

    name: str
    description: str
    fields: tuple[ArgumentField, ...]


@dataclass(frozen=True)
class Codebook:
    signatures: tuple[EventSignature, ...]
    version: str = ""
    groups: tuple[EventGroup, ...] = ()
    required_fields: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "_by_name", {s.type_name: s for s in self.signatures}
        )

    @property
    def type_names(self) -> list[str]:
        return [s.type_name for s in self.signatures]

    def __contains__(self, type_name: object) -> bool:
        return type_name in self._by_name  # type: ignore[attr-defined]

    def signature(self, type_name: str) -> EventSignature:
        try:
            return self._by_name[type_name]  # type: ignore[attr-defined]
        except KeyError:
            raise KeyError(f"unknown event type {type_name!r}") from None

    def order(self, type_name: str) -> int:
        return self.type_names.index(type_name)


@dataclass
class EventInstance:
    """One event: a type plus a role -> value map.

    Values are JSON-native: ``None``, ``bool``, ``int``, ``str``, a list of
    strings (category sets and entity references), or a ``{"country",
    "address"}`` mapping for locations.
    """

    event_type: str
    arguments: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"event_type": self.event_type, "arguments": dict(self.arguments)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> EventInstance:
        if not isinstance(data, Mapping) or "event_type" not in data:
            raise ValueError("event record needs an 'event_type'")
        args = data.get("arguments") or {}
        if not isinstance(args, Mapping):
            raise ValueError("'arguments' must be an object")
        return cls(event_type=data["event_type"], arguments=dict(args))


@dataclass(frozen=True)
class Violation:
    role: str | None
    reason: str

    def __str__(self) -> str:
        return f"{self.role}: {self.reason}" if self.role else self.reason


# ---------------------------------------------------------------------------
# Loading and writing
# ---------------------------------------------------------------------------


def _parse_field(raw: Mapping[str, Any], owner: str) -> ArgumentField:
    try:
        name = raw["name"]
        kind = raw["kind"]
    except (KeyError, TypeError) as exc:
        raise CodebookError(f"{owner}: field entry missing {exc}") from None
    try:
        domain = ArgumentDomain(kind=kind, options=tuple(raw.get("options") or ()))
        return ArgumentField(
            name=name,
            description=raw.get("description", ""),
            domain=domain,
            is_entity_field=bool(raw.get("is_entity_field", kind == "entity_set")),
            nullable=bool(raw.get("nullable", False)),
        )
    except CodebookError as exc:
        raise CodebookError(f"{owner}.{name}: {exc}") from None


def codebook_from_dict(data: Mapping[str, Any]) -> Codebook:
    if not isinstance(data, Mapping):
        raise CodebookError("codebook must be a JSON object")
    entries = data.get("event_types")
    if not isinstance(entries, list):
        raise CodebookError("codebook needs an 'event_types' list")

    seen: set[str] = set()
    groups: dict[str, EventGroup] = {}
    concrete: list[tuple[Mapping[str, Any], tuple[ArgumentField, ...]]] = []
    for entry in entries:
        name = entry.get("name")
        if not name:
            raise CodebookError("event type without a name")
        if name in seen:
            raise CodebookError(f"duplicate type_name {name!r}")
        seen.add(name)
        fields = tuple(_parse_field(f, name) for f in entry.get("fields", []))
        if entry.get("abstract"):
            groups[name] = EventGroup(name, entry.get("description", ""), fields)
        else:
            concrete.append((entry, fields))

    if not concrete:
        raise CodebookError("empty codebook")

    children: dict[str, int] = {g: 0 for g in groups}
    signatures = []
    for entry, own in concrete:
        name = entry["name"]
        parent = entry.get("parent")
        shared: tuple[ArgumentField, ...] = ()
        if parent in groups:
            shared = groups[parent].fields
            children[parent] += 1
        flat = shared + own
        names = [f.name for f in flat]
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            raise CodebookError(f"{name}: duplicate field(s) {sorted(dupes)}")
        if not flat:
            raise CodebookError(f"{name}: event type has no fields")
        description = entry.get("description", "")
        if not description:
            logger.warning("event type %s has an empty description", name)
        signatures.append(EventSignature(name, description, flat, parent))

    empty = [g for g, n in children.items() if n == 0]
    if empty:
        raise CodebookError(f"abstract type(s) with no children: {empty}")

    required = tuple(data.get("required_fields") or ())
    for sig in signatures:
        missing = [r for r in required if r not in sig.role_names]
        if missing:
            raise CodebookError(f"{sig.type_name}: missing required field(s) {missing}")

    return Codebook(
        tuple(signatures), str(data.get("version", "")), tuple(groups.values()), required
    )


def load_codebook(path: str | Path | None = None) -> Codebook:
    """Load and validate a codebook file; ``None`` loads the bundled codebook."""
    if path is None:
        text = resources.files("aee.data").joinpath(DEFAULT_CODEBOOK).read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CodebookError(f"codebook parse error: {exc}") from None
    return codebook_from_dict(data)


def _field_to_dict(f: ArgumentField) -> dict[str, Any]:
    out: dict[str, Any] = {"name": f.name, "description": f.description, "kind": f.domain.kind}
    if f.domain.options:
        out["options"] = list(f.domain.options)
    out["is_entity_field"] = f.is_entity_field
    out["nullable"] = f.nullable
    return out


def codebook_to_dict(cb: Codebook) -> dict[str, Any]:
    groups = {g.name: g for g in cb.groups}
    entries: list[dict[str, Any]] = []
    for g in cb.groups:
        entries.append(
            {
                "name": g.name,
                "description": g.description,
                "abstract": True,
                "fields": [_field_to_dict(f) for f in g.fields],
            }
        )
    for s in cb.signatures:
        own = s.fields
        if s.parent in groups:
            own = s.fields[len(groups[s.parent].fields):]
        entry: dict[str, Any] = {"name": s.type_name, "description": s.description}
        if s.parent is not None:
            entry["parent"] = s.parent
        entry["fields"] = [_field_to_dict(f) for f in own]
        entries.append(entry)
    out: dict[str, Any] = {"version": cb.version}
    if cb.required_fields:
        out["required_fields"] = list(cb.required_fields)
    out["event_types"] = entries
    return out


def write_codebook(cb: Codebook, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(codebook_to_dict(cb), indent=2, ensure_ascii=False) + "\n", "utf-8"
    )


# ---------------------------------------------------------------------------
# Instance validation
# ---------------------------------------------------------------------------


def _is_int(v: Any) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_str_list(v: Any) -> bool:
    return isinstance(v, list) and all(isinstance(x, str) for x in v)


def check_value(f: ArgumentField, value: Any) -> str | None:
    """Return a reason string if ``value`` is outside the field's domain."""
    if value is None:
        return None if f.nullable else "null not allowed"
    kind = f.domain.kind
    if kind == "boolean":
        return None if isinstance(value, bool) else "expected boolean"
    if kind == "integer":
        if not _is_int(value):
            return "expected integer"
        return None if value >= 0 else "count must be ≥ 0"
    if kind == "text":
        return None if isinstance(value, str) else "expected text"
    if kind == "categorical":
        if not isinstance(value, str):
            return "expected category label"
        return None if value in f.domain.options else f"unknown category {value!r}"
    if kind in ("categorical_set", "entity_set"):
        if not _is_str_list(value):
            return "expected list of strings"
        if len(set(value)) != len(value):
            return "duplicate entries"
        if kind == "categorical_set":
            bad = [x for x in value if x not in f.domain.options]
            if bad:
                return f"unknown category {bad[0]!r}"
        return None
    if kind == "location":
        if not isinstance(value, Mapping):
            return "expected location object"
        if set(value) != {"country", "address"}:
            return "location needs exactly 'country' and 'address'"
        if not isinstance(value["country"], str) or not isinstance(value["address"], str):
            return "location parts must be strings"
        if not value["country"].strip():
            return "location country is empty"
        return None
    return f"unsupported kind {kind}"  # pragma: no cover


def validate_instance(cb: Codebook, ev: EventInstance) -> list[Violation]:
    if ev.event_type not in cb:
        return [Violation(None, f"unknown event type {ev.event_type!r}")]
    sig = cb.signature(ev.event_type)
    out: list[Violation] = []
    known = set(sig.role_names)
    for role in ev.arguments:
        if role not in known:
            out.append(Violation(role, "unknown role"))
    for f in sig.fields:
        if f.name not in ev.arguments:
            if not f.nullable:
                out.append(Violation(f.name, "missing required role"))
            continue
        reason = check_value(f, ev.arguments[f.name])
        if reason:
            out.append(Violation(f.name, reason))
    return out


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _value_schema(f: ArgumentField) -> dict[str, Any]:
    kind = f.domain.kind
    if kind == "boolean":
        s: dict[str, Any] = {"type": "boolean"}
    elif kind == "integer":
        s = {"type": "integer", "minimum": 0}
    elif kind == "text":
        s = {"type": "string"}
    elif kind == "categorical":
        s = {"type": "string", "enum": list(f.domain.options)}
    elif kind == "categorical_set":
        s = {
            "type": "array",
            "items": {"type": "string", "enum": list(f.domain.options)},
            "uniqueItems": True,
        }
    elif kind == "entity_set":
        s = {"type": "array", "items": {"type": "string"}, "uniqueItems": True}
    else:
        s = {
            "type": "object",
            "properties": {
                "country": {"type": "string", "minLength": 1, "pattern": r"\S"},
                "address": {"type": "string"},
            },
            "required": ["country", "address"],
            "additionalProperties": False,
        }
    if f.nullable:
        s = {"anyOf": [s, {"type": "null"}]}
    s["description"] = f.description
    return s


def signature_schema(
    cb: Codebook, type_name: str, *, entity_fields: bool = True, other_fields: bool = True
) -> dict[str, Any]:
    sig = cb.signature(type_name)
    chosen = [
        f
        for f in sig.fields
        if (entity_fields and f.is_entity_field) or (other_fields and not f.is_entity_field)
    ]
    return {
        "title": sig.type_name,
        "type": "object",
        "properties": {f.name: _value_schema(f) for f in chosen},
        "required": [f.name for f in chosen if not f.nullable],
        "additionalProperties": False,
    }


def render_signature_schema(
    cb: Codebook, type_name: str, *, entity_fields: bool = True, other_fields: bool = True
) -> str:
    """JSON Schema text for one event type, stable byte-for-byte across runs."""
    schema = signature_schema(
        cb, type_name, entity_fields=entity_fields, other_fields=other_fields
    )
    return json.dumps(schema, indent=2, ensure_ascii=False)


def render_event_type_menu(cb: Codebook) -> str:
    lines = []
    for k, sig in enumerate(cb.signatures, start=1):
        if not sig.description:
            logger.warning("event type %s rendered with an empty description", sig.type_name)
        lines.append(f'[{k}] "{sig.type_name}": {sig.description}')
    return "\n\n".join(lines)
