"""Entity records and an exact dense-vector index over their descriptions."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Protocol, Sequence

import numpy as np

from aee.llm import atomic_write_text

logger = logging.getLogger(__name__)

INDEX_FORMAT_VERSION = 1
UNIT_NORM_TOL = 1e-6


class EntityError(ValueError):
    pass


class Embedder(Protocol):
    tag: str

    def embed(self, texts: Sequence[str]) -> list[list[float]]: ...


@dataclass(frozen=True)
class Entity:
    entity_id: str
    name: str
    description: str
    generic: bool | None = None
    first_seen_split: str | None = None

    def embedding_text(self) -> str:
        return f"{self.name}: {self.description}"

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "entity_id": self.entity_id,
            "name": self.name,
            "description": self.description,
        }
        if self.generic is not None:
            d["generic"] = self.generic
        if self.first_seen_split is not None:
            d["first_seen_split"] = self.first_seen_split
        return d


def entity_from_dict(raw: dict[str, Any]) -> Entity:
    for key in ("entity_id", "name", "description"):
        v = raw.get(key)
        if not isinstance(v, str) or not v.strip():
            raise EntityError(f"entity needs a non-empty {key!r}")
    generic = raw.get("generic")
    if generic is not None and not isinstance(generic, bool):
        raise EntityError("'generic' must be a boolean")
    return Entity(
        entity_id=raw["entity_id"],
        name=raw["name"],
        description=raw["description"],
        generic=generic,
        first_seen_split=raw.get("first_seen_split"),
    )


def load_entities(path: str | Path) -> list[Entity]:
    entities: list[Entity] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                ent = entity_from_dict(json.loads(line))
            except json.JSONDecodeError as exc:
                raise EntityError(f"line {lineno}: {exc}") from None
            except EntityError as exc:
                raise EntityError(f"line {lineno}: {exc}") from None
            if ent.entity_id in seen:
                raise EntityError(f"line {lineno}: duplicate entity_id {ent.entity_id!r}")
            seen.add(ent.entity_id)
            entities.append(ent)
    return entities


def write_entities(entities: Iterable[Entity], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entities:
            fh.write(json.dumps(e.to_dict(), ensure_ascii=False) + "\n")


class EntityIndex:
    """Immutable matrix of unit-norm embeddings, rows sorted by entity id."""

    def __init__(self, entity_ids: Sequence[str], vectors: np.ndarray, embedder_tag: str):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or len(entity_ids) != vectors.shape[0]:
            raise EntityError("one vector per entity is required")
        if len(set(entity_ids)) != len(entity_ids):
            raise EntityError("duplicate entity ids in index")
        order = sorted(range(len(entity_ids)), key=lambda i: entity_ids[i])
        self.entity_ids: tuple[str, ...] = tuple(entity_ids[i] for i in order)
        self.vectors = vectors[order]
        self.vectors.setflags(write=False)
        self.embedder_tag = embedder_tag
        norms = np.linalg.norm(self.vectors, axis=1)
        if len(norms) and np.max(np.abs(norms - 1.0)) > UNIT_NORM_TOL:
            raise EntityError("index vectors must be unit-norm")
        self._pos = {eid: i for i, eid in enumerate(self.entity_ids)}

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return len(self.entity_ids)

    def __contains__(self, entity_id: object) -> bool:
        return entity_id in self._pos

    def vector(self, entity_id: str) -> np.ndarray:
        return self.vectors[self._pos[entity_id]]

    def to_dict(self) -> dict[str, Any]:
        return {
            "format_version": INDEX_FORMAT_VERSION,
            "embedder_tag": self.embedder_tag,
            "d": self.dim,
            "entries": [
                {"entity_id": eid, "vector": vec.tolist()}
                for eid, vec in zip(self.entity_ids, self.vectors)
            ],
        }

    def save(self, path: str | Path) -> None:
        atomic_write_text(Path(path), json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> EntityIndex:
        data = json.loads(Path(path).read_text("utf-8"))
        if data.get("format_version") != INDEX_FORMAT_VERSION:
            raise EntityError(f"unsupported index format {data.get('format_version')!r}")
        entries = data["entries"]
        if not entries:
            raise EntityError("index file has no entries")
        vectors = np.array([e["vector"] for e in entries], dtype=np.float64)
        if vectors.shape[1] != data["d"]:
            raise EntityError("index dimension does not match its header")
        return cls([e["entity_id"] for e in entries], vectors, data["embedder_tag"])


def _normalize(rows: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise EntityError("embedder returned a zero vector")
    return rows / norms


def _embed_matrix(embedder: Embedder, texts: Sequence[str]) -> np.ndarray:
    raw = embedder.embed(list(texts))
    if len(raw) != len(texts):
        raise EntityError(f"embedder returned {len(raw)} vectors for {len(texts)} texts")
    dims = {len(v) for v in raw}
    if len(dims) != 1:
        raise EntityError(f"embedder returned mixed dimensions {sorted(dims)}")
    return np.asarray(raw, dtype=np.float64)


def build_index(entities: Sequence[Entity], embedder: Embedder, batch_size: int = 256) -> EntityIndex:
    """Embed ``"name: description"`` for every entity and L2-normalize."""
    if not entities:
        raise EntityError("cannot build an index over an empty entity list")
    blocks = []
    for start in range(0, len(entities), batch_size):
        chunk = entities[start : start + batch_size]
        blocks.append(_embed_matrix(embedder, [e.embedding_text() for e in chunk]))
    if len({b.shape[1] for b in blocks}) != 1:
        raise EntityError("embedding dimension changed between batches")
    vectors = _normalize(np.vstack(blocks))
    return EntityIndex([e.entity_id for e in entities], vectors, embedder.tag)


TIE_DECIMALS = 12


def retrieve(
    index: EntityIndex, query: str, k: int, embedder: Embedder
) -> list[tuple[str, float]]:
    """Exact top-k cosine search; ties resolve to the smaller entity id."""
    if k <= 0:
        raise ValueError("k must be positive")
    if embedder.tag != index.embedder_tag:
        raise EntityError(
            f"embedder tag {embedder.tag!r} does not match index tag {index.embedder_tag!r}"
        )
    q = _embed_matrix(embedder, [query])[0]
    if q.shape[0] != index.dim:
        raise EntityError(f"query dimension {q.shape[0]} != index dimension {index.dim}")
    q = _normalize(q[None, :])[0]
    scores = np.clip(index.vectors @ q, -1.0, 1.0)
    # rows are id-sorted, so a stable sort keeps id order within ties; rounding
    # stops float noise from splitting mathematically equal scores
    order = np.argsort(-np.round(scores, TIE_DECIMALS), kind="stable")[:k]
    return [(index.entity_ids[i], float(scores[i])) for i in order]

