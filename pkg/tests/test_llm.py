from __future__ import annotations

import json
import threading

import httpx
import numpy as np
import pytest

from aee.llm import (
    AuthenticationError,
    ChatRequest,
    HashingEmbedder,
    LLMGateway,
    OpenAIChatBackend,
    OpenAIEmbedBackend,
    ScriptedChatBackend,
    SchemaViolationError,
    TransportError,
    UnscriptedRequestError,
    extract_json,
)

SCHEMA = json.dumps({
    "type": "object",
    "properties": {"n": {"type": "integer", "minimum": 0}},
    "required": ["n"],
    "additionalProperties": False,
})


def req(user="hello", schema=None):
    return ChatRequest("m", "sys", user, output_schema=schema)


class CountingEmbed:
    def __init__(self, dim=8):
        self.inner = HashingEmbedder(dim=dim)
        self.batches = []

    def embed(self, texts, model):
        self.batches.append(list(texts))
        return self.inner.embed(texts)


def test_request_validation_and_fingerprint():
    with pytest.raises(ValueError):
        ChatRequest("m", " ", "u")
    with pytest.raises(ValueError):
        ChatRequest("m", "s", "u", temperature=-0.1)
    assert req().fingerprint() == req().fingerprint()
    assert req().fingerprint() != req(schema=SCHEMA).fingerprint()
    assert ChatRequest("m", "s", "u", temperature=0).fingerprint() == ChatRequest("m", "s", "u", temperature=0.0).fingerprint()


def test_cache_hit_makes_no_network_call(tmp_path):
    backend = ScriptedChatBackend()
    backend.add(req(), "hi there")
    gw = LLMGateway(backend, cache_dir=tmp_path)
    a = gw.chat(req())
    b = gw.chat(req())
    assert gw.network_calls == 1 and b.cached and a.text == b.text
    # a fresh gateway over the same directory replays byte-identical text from disk
    gw2 = LLMGateway(ScriptedChatBackend(), cache_dir=tmp_path)
    assert gw2.chat(req()).text == "hi there" and gw2.network_calls == 0


def test_no_cache_forces_calls(tmp_path):
    backend = ScriptedChatBackend()
    backend.add(req(), "x")
    gw = LLMGateway(backend, cache_dir=tmp_path, use_cache=False)
    gw.chat(req())
    gw.chat(req())
    assert gw.network_calls == 2
    assert not any(tmp_path.rglob("*.json"))


def test_unscripted_request_fails():
    with pytest.raises(UnscriptedRequestError):
        LLMGateway(ScriptedChatBackend()).chat(req("unknown"))


def test_transcript_round_trip(tmp_path):
    b = ScriptedChatBackend()
    b.add(req(), "one")
    b.to_jsonl(tmp_path / "t.jsonl", {req().fingerprint(): "note"})
    again = ScriptedChatBackend.from_jsonl(tmp_path / "t.jsonl")
    assert again.replies == b.replies


def test_schema_repair_then_success():
    original = req(schema=SCHEMA)
    b = ScriptedChatBackend()
    b.add(original, '{"n": "three"}')

    class Repairing:
        def complete(self, r):
            if r.fingerprint() in b.replies:
                return b.complete(r)
            assert "# correction" in r.user
            from aee.llm import ChatResponse
            return ChatResponse('```json\n{"n": 3}\n```')

    resp = LLMGateway(Repairing()).chat(original)
    assert resp.parsed == {"n": 3}


def test_schema_violation_after_repairs():
    class AlwaysBad:
        calls = 0

        def complete(self, r):
            from aee.llm import ChatResponse
            AlwaysBad.calls += 1
            return ChatResponse("not json at all")

    with pytest.raises(SchemaViolationError):
        LLMGateway(AlwaysBad(), max_repairs=2).chat(req(schema=SCHEMA))
    assert AlwaysBad.calls == 3


def test_extract_json_variants():
    assert extract_json('{"a": 1}') == {"a": 1}
    assert extract_json('Sure!\n```json\n[1, 2]\n```') == [1, 2]
    assert extract_json('prefix {"a": {"b": 2}} trailing') == {"a": {"b": 2}}
    with pytest.raises(ValueError):
        extract_json("nothing here")


def test_embed_order_duplicates_and_batching(tmp_path):
    be = CountingEmbed()
    gw = LLMGateway(embed_backend=be, cache_dir=tmp_path, embed_batch_size=4)
    out = gw.embed(["a", "b", "a"], "e")
    assert len(out) == 3 and out[0] == out[2] and out[0] != out[1]
    texts = [f"t{i}" for i in range(10)]
    vecs = gw.embed(texts, "e")
    assert all(len(b) <= 4 for b in be.batches)
    single = LLMGateway(embed_backend=CountingEmbed(), embed_batch_size=1000).embed(texts, "e")
    assert np.allclose(vecs, single)
    calls = gw.network_calls
    gw.embed(texts, "e")
    assert gw.network_calls == calls
    with pytest.raises(ValueError):
        gw.embed([], "e")


def test_embed_dimension_inconsistency():
    class Mixed:
        def embed(self, texts, model):
            return [[0.0] * (2 + i) for i, _ in enumerate(texts)]

    from aee.llm import LLMError
    with pytest.raises(LLMError):
        LLMGateway(embed_backend=Mixed()).embed(["a", "b"], "e")


def test_concurrent_callers_respect_inflight_limit():
    peak = 0
    active = 0
    lock = threading.Lock()
    gate = threading.Event()

    class Slow:
        def complete(self, r):
            nonlocal peak, active
            from aee.llm import ChatResponse
            with lock:
                active += 1
                peak = max(peak, active)
            gate.wait(0.05)
            with lock:
                active -= 1
            return ChatResponse("ok")

    gw = LLMGateway(Slow(), max_inflight=3)
    threads = [threading.Thread(target=gw.chat, args=(req(f"u{i}"),)) for i in range(12)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert peak <= 3 and gw.network_calls == 12


# -- HTTP backends over httpx.MockTransport ----------------------------------


def _chat_backend(handler, **kw):
    return OpenAIChatBackend("http://llm.test/v1", "k", transport=httpx.MockTransport(handler), sleep=lambda s: None, **kw)


def test_openai_chat_wire_format_and_retry():
    seen = []

    def handler(request: httpx.Request):
        seen.append(json.loads(request.content))
        if len(seen) < 3:
            return httpx.Response(503, text="busy")
        return httpx.Response(200, json={"choices": [{"message": {"content": '{"n": 1}'}}], "usage": {"prompt_tokens": 5, "completion_tokens": 2}})

    resp = LLMGateway(_chat_backend(handler)).chat(req(schema=SCHEMA))
    assert resp.parsed == {"n": 1} and resp.usage["prompt_tokens"] == 5
    body = seen[-1]
    assert body["temperature"] == 0.0
    assert body["messages"][0] == {"role": "system", "content": "sys"}
    assert body["response_format"]["json_schema"]["schema"]["required"] == ["n"]


def test_openai_chat_auth_failure_is_not_retried():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(401, text="bad key")

    with pytest.raises(AuthenticationError):
        _chat_backend(handler).complete(req())
    assert len(calls) == 1


def test_openai_chat_gives_up():
    backoffs = []
    backend = OpenAIChatBackend(
        "http://llm.test/v1", "k",
        transport=httpx.MockTransport(lambda r: httpx.Response(500)),
        sleep=backoffs.append, max_retries=3, backoff=0.5,
    )
    with pytest.raises(TransportError):
        backend.complete(req())
    assert backoffs == [0.5, 1.0, 2.0]


def test_backends_need_configuration(monkeypatch):
    monkeypatch.delenv("LLM_BASE_URL", raising=False)
    monkeypatch.delenv("EMBED_API_KEY", raising=False)
    from aee.llm import LLMError
    with pytest.raises(LLMError):
        OpenAIChatBackend()
    with pytest.raises(AuthenticationError):
        OpenAIEmbedBackend("http://e.test")


def test_openai_embed_backend():
    def handler(request):
        body = json.loads(request.content)
        rows = [{"index": i, "embedding": [float(len(t)), 1.0]} for i, t in enumerate(body["input"])]
        return httpx.Response(200, json={"data": list(reversed(rows))})

    be = OpenAIEmbedBackend("http://e.test", "k", transport=httpx.MockTransport(handler))
    assert be.embed(["a", "bbb"], "m") == [[1.0, 1.0], [3.0, 1.0]]


def test_hashing_embedder_is_deterministic_and_unit():
    e = HashingEmbedder(dim=64)
    a, b = e.embed(["police fired tear gas", "police fired tear gas"])
    assert a == b and abs(np.linalg.norm(a) - 1) < 1e-9
    assert e.tag != HashingEmbedder(dim=64, seed=3).tag
