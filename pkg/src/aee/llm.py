"""Chat-completion and embedding gateway.

One entry point for every model call in the package. Requests are
content-addressed and cached on disk; structured outputs are parsed and
validated, with a bounded repair loop that re-prompts with the validation
error. Backends speak the OpenAI-compatible HTTP protocol, or replay a
scripted transcript in tests.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol, Sequence

import httpx
import jsonschema
import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_MAX_REPAIRS = 2
DEFAULT_MAX_INFLIGHT = 8
DEFAULT_EMBED_BATCH = 64


class LLMError(RuntimeError):
    """Base class for gateway failures."""


class TransportError(LLMError):
    pass


class AuthenticationError(LLMError):
    pass


class SchemaViolationError(LLMError):
    """The model's output could not be parsed or validated, even after repairs."""


class UnscriptedRequestError(LLMError):
    """A scripted backend received a request it has no reply for."""


@dataclass(frozen=True)
class ChatRequest:
    model: str
    system: str
    user: str
    output_schema: str | None = None
    temperature: float = 0.0

    def __post_init__(self) -> None:
        if not self.system.strip() or not self.user.strip():
            raise ValueError("system and user prompts must be non-empty")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    def fingerprint(self) -> str:
        payload = json.dumps(
            [self.model, self.system, self.user, self.output_schema, float(self.temperature)],
            ensure_ascii=False,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass
class ChatResponse:
    text: str
    parsed: Any = None
    usage: dict[str, int] = field(default_factory=dict)
    cached: bool = False


class ChatBackend(Protocol):
    def complete(self, req: ChatRequest) -> ChatResponse: ...


class EmbedBackend(Protocol):
    def embed(self, texts: Sequence[str], model: str) -> list[list[float]]: ...


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


def _post_with_retry(
    client: httpx.Client,
    url: str,
    body: dict[str, Any],
    *,
    max_retries: int,
    backoff: float,
    sleep: Callable[[float], None],
) -> dict[str, Any]:
    last: Exception | None = None
    for attempt in range(max_retries + 1):
        if attempt:
            sleep(backoff * 2 ** (attempt - 1))
        try:
            resp = client.post(url, json=body)
        except httpx.HTTPError as exc:
            last = exc
            logger.warning("transport error on attempt %d: %s", attempt + 1, exc)
            continue
        if resp.status_code in (401, 403):
            raise AuthenticationError(f"{resp.status_code} from {url}: {resp.text[:200]}")
        if resp.status_code == 429 or resp.status_code >= 500:
            last = TransportError(f"{resp.status_code} from {url}: {resp.text[:200]}")
            logger.warning("retryable status %d on attempt %d", resp.status_code, attempt + 1)
            continue
        if resp.status_code >= 400:
            raise TransportError(f"{resp.status_code} from {url}: {resp.text[:200]}")
        return resp.json()
    raise TransportError(f"giving up after {max_retries + 1} attempts: {last}")


class OpenAIChatBackend:
    """Chat completions over an OpenAI-compatible endpoint."""

    def __init__(
        self,
        base_url: str | None = None,
        api_key: str | None = None,
        *,
        max_retries: int = 4,
        backoff: float = 1.0,
        timeout: float = 120.0,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        base_url = base_url or os.environ.get("LLM_BASE_URL")
        api_key = api_key or os.environ.get("LLM_API_KEY")
        if not base_url:
            raise LLMError("no chat endpoint configured (set LLM_BASE_URL)")
        if not api_key:
            raise AuthenticationError("no credentials configured (set LLM_API_KEY)")
        self.base_url = base_url.rstrip("/")
        self.max_retries = max_retries
        self.backoff = backoff
        self._sleep = sleep
        self._client = httpx.Client(
            headers={"Authorization": f"Bearer {api_key}"},
            timeout=timeout,
            transport=transport,
        )

    def complete(self, req: ChatRequest) -> ChatResponse:
        body: dict[str, Any] = {
            "model": req.model,
            "temperature": req.temperature,
            "messages": [
                {"role": "system", "content": req.system},
                {"role": "user", "content": req.user},
            ],
        }
        if req.output_schema is not None:
            body["response_format"] = {
                "type": "json_schema",
                "json_schema": {"name": "output", "schema": json.loads(req.output_schema)},
            }
        data = _post_with_retry(
            self._client,
            f"{self.base_url}/chat/completions",
            body,
            max_retries=self.max_retries,
            backoff=self.backoff,
            sleep=self._sleep,
        )
        try:
            text = data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError):
            raise TransportError(f"unexpected completion payload: {str(data)[:200]}") from None
        usage = data.get("usage") or {}
        return ChatResponse(
            text=text,
            usage={
                "prompt_tokens": int(usage.get("prompt_tokens", 0)),
                "completion_tokens": int(usage.get("completion_tokens", 0)),
            },
        )


class OpenAIEmbedBackend:
    def __init__(
        self,
        base_url: str | None = None,
        api_key: str | None = None,
        *,
        max_retries: int = 4,
        backoff: float = 1.0,
        timeout: float = 120.0,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        base_url = base_url or os.environ.get("EMBED_BASE_URL")
        api_key = api_key or os.environ.get("EMBED_API_KEY")
        if not base_url:
            raise LLMError("no embedding endpoint configured (set EMBED_BASE_URL)")
        if not api_key:
            raise AuthenticationError("no credentials configured (set EMBED_API_KEY)")
        self.base_url = base_url.rstrip("/")
        self.max_retries = max_retries
        self.backoff = backoff
        self._sleep = sleep
        self._client = httpx.Client(
            headers={"Authorization": f"Bearer {api_key}"},
            timeout=timeout,
            transport=transport,
        )

    def embed(self, texts: Sequence[str], model: str) -> list[list[float]]:
        data = _post_with_retry(
            self._client,
            f"{self.base_url}/embeddings",
            {"model": model, "input": list(texts)},
            max_retries=self.max_retries,
            backoff=self.backoff,
            sleep=self._sleep,
        )
        rows = sorted(data.get("data", []), key=lambda r: r.get("index", 0))
        if len(rows) != len(texts):
            raise TransportError(f"expected {len(texts)} embeddings, got {len(rows)}")
        return [list(map(float, r["embedding"])) for r in rows]


class ScriptedChatBackend:
    """Replays canned replies keyed by request fingerprint."""

    def __init__(self, replies: dict[str, str] | None = None):
        self.replies: dict[str, str] = dict(replies or {})
        self.calls: list[ChatRequest] = []
        self._lock = threading.Lock()

    def add(self, req: ChatRequest, reply: str) -> None:
        self.replies[req.fingerprint()] = reply

    def complete(self, req: ChatRequest) -> ChatResponse:
        with self._lock:
            self.calls.append(req)
        fp = req.fingerprint()
        if fp not in self.replies:
            preview = req.user[:120].replace("\n", " ")
            raise UnscriptedRequestError(f"no scripted reply for {fp[:12]} ({preview!r})")
        return ChatResponse(text=self.replies[fp])

    @classmethod
    def from_jsonl(cls, *paths: str | Path) -> ScriptedChatBackend:
        replies: dict[str, str] = {}
        for path in paths:
            with open(path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        row = json.loads(line)
                        replies[row["fingerprint"]] = row["reply"]
        return cls(replies)

    def to_jsonl(self, path: str | Path, notes: dict[str, str] | None = None) -> None:
        notes = notes or {}
        with open(path, "w", encoding="utf-8") as fh:
            for fp, reply in self.replies.items():
                row = {"fingerprint": fp, "note": notes.get(fp, ""), "reply": reply}
                fh.write(json.dumps(row, ensure_ascii=False) + "\n")


_TOKEN = re.compile(r"\w+", re.UNICODE)


class HashingEmbedder:
    """Deterministic bag-of-words feature-hashing embedder.

    Texts sharing words land close together, which makes it usable as an
    offline stand-in for a neural embedder in tests and demos.
    """

    def __init__(self, dim: int = 256, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self.tag = f"hashing-v1:d{dim}:s{seed}"

    def _vector(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim)
        tokens = _TOKEN.findall(text.lower()) or ["<empty>"]
        for tok in tokens:
            h = hashlib.blake2b(f"{self.seed}|{tok}".encode(), digest_size=8).digest()
            n = int.from_bytes(h, "little")
            vec[n % self.dim] += 1.0 if (n >> 63) & 1 else -1.0
        norm = np.linalg.norm(vec)
        if norm == 0:
            vec[0] = 1.0
            return vec
        return vec / norm

    def embed(self, texts: Sequence[str], model: str | None = None) -> list[list[float]]:
        return [self._vector(t).tolist() for t in texts]


# ---------------------------------------------------------------------------
# Cache
# ---------------------------------------------------------------------------


def atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class ResponseCache:
    """Content-addressed JSON blobs under ``root/<kind>/<key[:2]>/<key>.json``."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def _path(self, kind: str, key: str) -> Path:
        return self.root / kind / key[:2] / f"{key}.json"

    def get(self, kind: str, key: str) -> Any:
        p = self._path(kind, key)
        if not p.exists():
            return None
        return json.loads(p.read_text("utf-8"))

    def put(self, kind: str, key: str, value: Any) -> None:
        atomic_write_text(self._path(kind, key), json.dumps(value, ensure_ascii=False))


# ---------------------------------------------------------------------------
# Gateway
# ---------------------------------------------------------------------------


def extract_json(text: str) -> Any:
    """Parse the JSON value in a reply, tolerating code fences and surrounding prose."""
    stripped = text.strip()
    fence = re.search(r"```(?:json)?\s*(.*?)```", stripped, re.DOTALL)
    if fence:
        stripped = fence.group(1).strip()
    try:
        return json.loads(stripped)
    except json.JSONDecodeError:
        pass
    starts = [i for i in (stripped.find("{"), stripped.find("[")) if i >= 0]
    if not starts:
        raise ValueError("no JSON value found in reply")
    decoder = json.JSONDecoder()
    try:
        value, _ = decoder.raw_decode(stripped[min(starts):])
    except json.JSONDecodeError as exc:
        raise ValueError(f"invalid JSON: {exc}") from None
    return value


REPAIR_NOTE = (
    "\n\n# correction {attempt}\n"
    "Your previous reply could not be used:\n{error}\n"
    "Previous reply:\n{reply}\n"
    "Answer again, following the required output format exactly."
)


class LLMGateway:
    """Cached, rate-bounded access to chat and embedding backends."""

    def __init__(
        self,
        chat_backend: ChatBackend | None = None,
        embed_backend: EmbedBackend | None = None,
        *,
        cache_dir: str | Path | None = None,
        use_cache: bool = True,
        max_repairs: int = DEFAULT_MAX_REPAIRS,
        max_inflight: int = DEFAULT_MAX_INFLIGHT,
        embed_batch_size: int = DEFAULT_EMBED_BATCH,
    ):
        self.chat_backend = chat_backend
        self.embed_backend = embed_backend
        self.cache = ResponseCache(cache_dir) if cache_dir else None
        self.use_cache = use_cache
        self.max_repairs = max_repairs
        self.embed_batch_size = embed_batch_size
        self._inflight = threading.BoundedSemaphore(max_inflight)
        self._memo: dict[tuple[str, str], Any] = {}
        self._memo_lock = threading.Lock()
        self.network_calls = 0

    # -- chat ---------------------------------------------------------------

    def _raw_chat(self, req: ChatRequest) -> ChatResponse:
        key = req.fingerprint()
        if self.use_cache:
            hit = self._lookup("chat", key)
            if hit is not None:
                return ChatResponse(text=hit["text"], usage=hit.get("usage", {}), cached=True)
        if self.chat_backend is None:
            raise LLMError("no chat backend configured")
        with self._inflight:
            self.network_calls += 1
            resp = self.chat_backend.complete(req)
        self._store("chat", key, {"text": resp.text, "usage": resp.usage})
        return resp

    def chat(
        self, req: ChatRequest, parse: Callable[[str], Any] | None = None
    ) -> ChatResponse:
        """Run one request, validating structured output when asked.

        ``parse`` turns the reply text into a value (raising ``ValueError``
        on bad output); with an ``output_schema`` and no ``parse`` the reply
        is read as JSON. The parsed value is checked against the schema and
        failures trigger up to ``max_repairs`` corrective re-prompts.
        """
        if parse is None and req.output_schema is None:
            return self._raw_chat(req)
        if parse is None:
            parse = extract_json
        schema = json.loads(req.output_schema) if req.output_schema else None

        current = req
        error = ""
        for attempt in range(self.max_repairs + 1):
            resp = self._raw_chat(current)
            try:
                value = parse(resp.text)
                if schema is not None:
                    jsonschema.validate(value, schema)
            except (ValueError, jsonschema.ValidationError) as exc:
                error = exc.message if isinstance(exc, jsonschema.ValidationError) else str(exc)
                logger.warning("unusable model output (attempt %d): %s", attempt + 1, error)
                current = ChatRequest(
                    model=req.model,
                    system=req.system,
                    user=req.user + REPAIR_NOTE.format(attempt=attempt + 1, error=error, reply=resp.text),
                    output_schema=req.output_schema,
                    temperature=req.temperature,
                )
                continue
            resp.parsed = value
            return resp
        raise SchemaViolationError(
            f"output still invalid after {self.max_repairs} repair attempt(s): {error}"
        )

    # -- embeddings -----------------------------------------------------------

    def embed(self, texts: Sequence[str], model: str) -> list[list[float]]:
        if not texts:
            raise ValueError("embed needs a non-empty batch")
        out: list[list[float] | None] = [None] * len(texts)
        todo: dict[str, list[int]] = {}
        for i, t in enumerate(texts):
            key = self._embed_key(model, t)
            hit = self._lookup("embed", key) if self.use_cache else None
            if hit is not None:
                out[i] = hit
            else:
                todo.setdefault(t, []).append(i)
        pending = list(todo)
        if pending and self.embed_backend is None:
            raise LLMError("no embedding backend configured")
        for start in range(0, len(pending), self.embed_batch_size):
            batch = pending[start : start + self.embed_batch_size]
            with self._inflight:
                self.network_calls += 1
                vectors = self.embed_backend.embed(batch, model)  # type: ignore[union-attr]
            if len(vectors) != len(batch):
                raise TransportError(f"expected {len(batch)} vectors, got {len(vectors)}")
            for text, vec in zip(batch, vectors):
                self._store("embed", self._embed_key(model, text), vec)
                for i in todo[text]:
                    out[i] = vec
        dims = {len(v) for v in out}  # type: ignore[arg-type]
        if len(dims) != 1:
            raise LLMError(f"inconsistent embedding dimensions {sorted(dims)}")
        return out  # type: ignore[return-value]

    @staticmethod
    def _embed_key(model: str, text: str) -> str:
        return hashlib.sha256(json.dumps([model, text], ensure_ascii=False).encode()).hexdigest()

    # -- cache plumbing -------------------------------------------------------

    def _lookup(self, kind: str, key: str) -> Any:
        with self._memo_lock:
            if (kind, key) in self._memo:
                return self._memo[(kind, key)]
        if self.cache is None:
            return None
        value = self.cache.get(kind, key)
        if value is not None:
            with self._memo_lock:
                self._memo[(kind, key)] = value
        return value

    def _store(self, kind: str, key: str, value: Any) -> None:
        if not self.use_cache:
            return
        with self._memo_lock:
            self._memo[(kind, key)] = value
        if self.cache is not None:
            self.cache.put(kind, key, value)


class GatewayEmbedder:
    """Adapts a gateway + model name to the embedder interface used by the entity index."""

    def __init__(self, gateway: LLMGateway, model: str):
        self.gateway = gateway
        self.model = model
        self.tag = f"gateway:{model}"

    def embed(self, texts: Sequence[str], model: str | None = None) -> list[list[float]]:
        return self.gateway.embed(list(texts), model or self.model)

