"""Command-line entry point: ``aee index|detect|args|link|e2e|score|stats``.

Run parameters come from built-in defaults, then an optional JSON config
file (``--config``), then explicit flags. The resolved configuration is
hashed and the hash is written into every output for provenance.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Sequence

from aee import __version__
from aee.codebook import Codebook, EventInstance, load_codebook
from aee.corpus import Document, GoldRecord, corpus_stats, document_from_dict, load_corpus
from aee.entity_db import EntityIndex, build_index, load_entities
from aee.evaluation import (
    EntitySubsets,
    GeoLocationKey,
    ScoreReport,
    score_aeae,
    score_ael,
    score_e2e,
    score_ed,
    string_location_key,
)
from aee.extract import Extractor, Prediction
from aee.geonorm import GeoCache, NominatimGeocoder
from aee.llm import (
    GatewayEmbedder,
    HashingEmbedder,
    LLMGateway,
    OpenAIChatBackend,
    OpenAIEmbedBackend,
    ScriptedChatBackend,
)
from aee.prompts import PROMPT_VERSION
from aee.zest import K_PER_QUERY, MAX_CANDIDATES, MAX_QUERIES, Linker

logger = logging.getLogger("aee")

EXIT_OK = 0
EXIT_DOC_ERRORS = 1
EXIT_HARD_ERROR = 2
EXIT_INTERRUPTED = 130

# errors that make every further request pointless
_FATAL_ERROR_TYPES = {"AuthenticationError"}


@dataclass
class RunConfig:
    codebook: str | None = None
    corpus: str | None = None
    entities: str | None = None
    index: str | None = None
    predictions: str | None = None
    out: str | None = None
    cache_dir: str | None = None
    workers: int = 4
    gold_type: bool = False
    no_cache: bool = False
    strict: bool = False
    split: str | None = None
    chat_model: str = "gpt-4o"
    embed_model: str = "text-embedding-3-large"
    embedder: str = "hashing"
    embed_dim: int = 256
    mock: list[str] = field(default_factory=list)
    k_per_query: int = K_PER_QUERY
    max_candidates: int = MAX_CANDIDATES
    max_queries: int = MAX_QUERIES
    max_repairs: int = 2
    task: str | None = None
    csv: str | None = None
    geocode_cache: str | None = None
    geocoder: str = "offline"
    user_agent: str | None = None
    case_insensitive_text: bool = False
    round: bool = False

    # fields that cannot change any output byte
    _NON_SEMANTIC = ("out", "csv", "workers")

    def config_hash(self) -> str:
        payload = {k: v for k, v in asdict(self).items() if k not in self._NON_SEMANTIC}
        payload["_version"] = __version__
        payload["_prompt_version"] = PROMPT_VERSION
        blob = json.dumps(payload, sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def require(self, *names: str) -> None:
        missing = [n for n in names if getattr(self, n) in (None, "")]
        if missing:
            raise ConfigError(f"missing required setting(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
        for n in names:
            if n in ("codebook", "corpus", "entities", "index", "predictions") and not Path(getattr(self, n)).exists():
                raise ConfigError(f"--{n} path does not exist: {getattr(self, n)}")


class ConfigError(ValueError):
    pass


def resolve_config(args: argparse.Namespace) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    values: dict[str, Any] = {}
    if args.config:
        raw = json.loads(Path(args.config).read_text("utf-8"))
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        values.update(raw)
    for k, v in vars(args).items():
        if k in known and v is not None:
            values[k] = v
    cfg = RunConfig(**values)
    if cfg.workers < 1:
        raise ConfigError("--workers must be ≥ 1")
    if cfg.embedder not in ("hashing", "gateway"):
        raise ConfigError(f"unknown embedder {cfg.embedder!r}")
    if cfg.geocoder not in ("offline", "live"):
        raise ConfigError(f"unknown geocoder mode {cfg.geocoder!r}")
    return cfg


# ---------------------------------------------------------------------------
# Wiring
# ---------------------------------------------------------------------------


def _codebook(cfg: RunConfig) -> Codebook:
    return load_codebook(cfg.codebook)


def _gateway(cfg: RunConfig, *, chat: bool, embed: bool) -> LLMGateway:
    chat_backend = None
    if chat:
        chat_backend = ScriptedChatBackend.from_jsonl(*cfg.mock) if cfg.mock else OpenAIChatBackend()
    embed_backend = OpenAIEmbedBackend() if embed and cfg.embedder == "gateway" else None
    return LLMGateway(
        chat_backend,
        embed_backend,
        cache_dir=cfg.cache_dir,
        use_cache=not cfg.no_cache,
        max_repairs=cfg.max_repairs,
        max_inflight=cfg.workers,
    )


def _embedder(cfg: RunConfig, gateway: LLMGateway):
    if cfg.embedder == "hashing":
        return HashingEmbedder(dim=cfg.embed_dim)
    return GatewayEmbedder(gateway, cfg.embed_model)


def _split_filter(cfg: RunConfig, docs: list) -> list:
    if cfg.split is None:
        return docs
    return [d for d in docs if (d.document if isinstance(d, GoldRecord) else d).split == cfg.split]


def _gold(cfg: RunConfig, cb: Codebook) -> list[GoldRecord]:
    cfg.require("corpus")
    return _split_filter(cfg, load_corpus(cfg.corpus, cb, strict=cfg.strict))


def _documents(cfg: RunConfig) -> list[Document]:
    """Documents for detection/e2e; gold annotations are optional here."""
    cfg.require("corpus")
    docs: list[Document] = []
    seen: set[str] = set()
    with open(cfg.corpus, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = document_from_dict(json.loads(line))
            except (json.JSONDecodeError, ValueError) as exc:
                if cfg.strict:
                    raise ConfigError(f"{cfg.corpus}:{lineno}: {exc}") from exc
                logger.warning("%s:%d skipped: %s", cfg.corpus, lineno, exc)
                continue
            if doc.doc_id in seen:
                raise ConfigError(f"{cfg.corpus}:{lineno}: duplicate doc_id {doc.doc_id!r}")
            seen.add(doc.doc_id)
            docs.append(doc)
    return _split_filter(cfg, docs)


def _linker(cfg: RunConfig, gateway: LLMGateway) -> Linker:
    cfg.require("entities", "index")
    entities = load_entities(cfg.entities)
    index = EntityIndex.load(cfg.index)
    return Linker(
        gateway,
        index,
        _embedder(cfg, gateway),
        entities,
        model=cfg.chat_model,
        k_per_query=cfg.k_per_query,
        max_candidates=cfg.max_candidates,
        max_queries=cfg.max_queries,
    )


def _write_json(path: str | None, payload: Any) -> None:
    text = json.dumps(payload, indent=2, ensure_ascii=False, sort_keys=False) + "\n"
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# Batch runner
# ---------------------------------------------------------------------------

Job = Callable[[], "tuple[Prediction, dict[str, Any] | None]"]


def run_batch(cfg: RunConfig, doc_ids: Sequence[str], jobs: Sequence[Job]) -> int:
    """Run ``jobs`` on a bounded pool, writing results in input order.

    Each finished line is flushed immediately so an interrupted run leaves a
    valid prefix of the output file.
    """
    cfg.require("out")
    out = Path(cfg.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    trace_path = out.with_name(out.stem + ".trace.jsonl")
    chash = cfg.config_hash()
    n_err = 0
    fatal: str | None = None
    pool = ThreadPoolExecutor(max_workers=cfg.workers)
    futures = [pool.submit(job) for job in jobs]
    written = 0
    try:
        with open(out, "w", encoding="utf-8") as fo, open(trace_path, "w", encoding="utf-8") as ft:
            for doc_id, fut in zip(doc_ids, futures):
                pred, trace = fut.result()
                if trace is not None:
                    pred.trace_ref = f"{trace_path.name}#{doc_id}"
                    ft.write(json.dumps({"doc_id": doc_id, "config_hash": chash, **trace}, ensure_ascii=False) + "\n")
                    ft.flush()
                row = {**pred.to_dict(), "config_hash": chash}
                fo.write(json.dumps(row, ensure_ascii=False) + "\n")
                fo.flush()
                written += 1
                if pred.errors:
                    n_err += 1
                    for e in pred.errors:
                        logger.error("%s: %s failed: %s", doc_id, e.get("stage"), e.get("message"))
                        if e.get("type") in _FATAL_ERROR_TYPES:
                            fatal = e.get("message")
                    if fatal:
                        break
                if written % 50 == 0:
                    logger.info("%d/%d documents done", written, len(jobs))
    except KeyboardInterrupt:
        pool.shutdown(wait=False, cancel_futures=True)
        logger.error("interrupted; %d/%d predictions flushed to %s", written, len(jobs), out)
        return EXIT_INTERRUPTED
    pool.shutdown(wait=not fatal, cancel_futures=True)
    if fatal:
        logger.error("aborting after fatal error: %s", fatal)
        return EXIT_HARD_ERROR
    logger.info("%d predictions written to %s (%d with errors)", written, out, n_err)
    if n_err and cfg.strict:
        return EXIT_DOC_ERRORS
    return EXIT_OK


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_index(cfg: RunConfig) -> int:
    cfg.require("entities", "out")
    entities = load_entities(cfg.entities)
    gateway = _gateway(cfg, chat=False, embed=True)
    index = build_index(entities, _embedder(cfg, gateway))
    index.save(cfg.out)
    logger.info("indexed %d entities (d=%d, %s) into %s", len(entities), index.dim, index.embedder_tag, cfg.out)
    return EXIT_OK


def cmd_detect(cfg: RunConfig) -> int:
    cb = _codebook(cfg)
    docs = _documents(cfg)
    ex = Extractor(_gateway(cfg, chat=True, embed=False), cb, model=cfg.chat_model)
    return run_batch(cfg, [d.doc_id for d in docs], [lambda d=d: (ex.run_detect(d), None) for d in docs])


def cmd_args(cfg: RunConfig) -> int:
    cb = _codebook(cfg)
    golds = _gold(cfg, cb)
    ex = Extractor(_gateway(cfg, chat=True, embed=False), cb, model=cfg.chat_model)
    jobs = [lambda g=g: (ex.run_arguments(g.document, g.gold.event_type), None) for g in golds]
    return run_batch(cfg, [g.doc_id for g in golds], jobs)


def cmd_link(cfg: RunConfig) -> int:
    cb = _codebook(cfg)
    golds = _gold(cfg, cb)
    gateway = _gateway(cfg, chat=True, embed=True)
    ex = Extractor(gateway, cb, model=cfg.chat_model, linker=_linker(cfg, gateway))
    jobs = [lambda g=g: ex.run_link(g.document, g.gold.event_type) for g in golds]
    return run_batch(cfg, [g.doc_id for g in golds], jobs)


def cmd_e2e(cfg: RunConfig) -> int:
    cb = _codebook(cfg)
    gateway = _gateway(cfg, chat=True, embed=True)
    ex = Extractor(gateway, cb, model=cfg.chat_model, linker=_linker(cfg, gateway))
    if cfg.gold_type:
        golds = _gold(cfg, cb)
        ids = [g.doc_id for g in golds]
        jobs = [lambda g=g: ex.run_e2e(g.document, g.gold.event_type) for g in golds]
    else:
        docs = _documents(cfg)
        ids = [d.doc_id for d in docs]
        jobs = [lambda d=d: ex.run_e2e(d) for d in docs]
    return run_batch(cfg, ids, jobs)


def load_predictions(path: str | Path) -> dict[str, EventInstance | None]:
    preds: dict[str, EventInstance | None] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            p = Prediction.from_dict(json.loads(line))
            if p.doc_id in preds:
                raise ConfigError(f"{path}:{lineno}: duplicate doc_id {p.doc_id!r}")
            preds[p.doc_id] = p.event
    return preds


def cmd_score(cfg: RunConfig) -> int:
    cfg.require("task", "corpus", "predictions")
    cb = _codebook(cfg)
    golds = _gold(cfg, cb)
    preds = load_predictions(cfg.predictions)
    if cfg.split is not None:
        keep = {g.doc_id for g in golds}
        preds = {k: v for k, v in preds.items() if k in keep}

    if cfg.geocode_cache or cfg.geocoder == "live":
        geocoder = NominatimGeocoder(
            GeoCache(cfg.geocode_cache),
            offline=cfg.geocoder == "offline",
            user_agent=cfg.user_agent,
        )
        location_key: Any = GeoLocationKey(geocoder)
    else:
        logger.warning("no geocode cache configured; locations compared as case-folded strings")
        location_key = string_location_key
    text_opts = dict(location_key=location_key, case_sensitive_text=not cfg.case_insensitive_text)

    report: ScoreReport
    if cfg.task == "ed":
        report = score_ed(golds, preds, cb)
    elif cfg.task == "aeae":
        report = score_aeae(golds, preds, cb, use_gold_type=True, **text_opts)
    elif cfg.task == "ael":
        subsets = known = None
        if cfg.entities:
            entities = load_entities(cfg.entities)
            all_gold = load_corpus(cfg.corpus, cb, strict=cfg.strict)
            subsets = EntitySubsets.build(all_gold, cb, entities)
            known = {e.entity_id for e in entities}
        report = score_ael(golds, preds, cb, use_gold_type=True, subsets=subsets, known_ids=known)
    elif cfg.task == "e2e":
        report = score_e2e(golds, preds, cb, **text_opts)
    else:
        raise ConfigError(f"unknown task {cfg.task!r}")
    payload = report.to_dict()
    payload["meta"]["config_hash"] = cfg.config_hash()
    _write_json(cfg.out, payload)
    if cfg.csv:
        Path(cfg.csv).write_text(report.to_csv(), encoding="utf-8")
    o = report.overall
    logger.info("%s: P=%.4f R=%.4f F1=%.4f (tp=%d fp=%d fn=%d)", cfg.task, o.precision, o.recall, o.f1, o.tp, o.fp, o.fn)
    return EXIT_OK


def cmd_stats(cfg: RunConfig) -> int:
    cb = _codebook(cfg)
    golds = _gold(cfg, cb)
    payload = corpus_stats(golds).to_dict(rounded=cfg.round)
    payload["config_hash"] = cfg.config_hash()
    _write_json(cfg.out, payload)
    return EXIT_OK


COMMANDS: dict[str, Callable[[RunConfig], int]] = {
    "index": cmd_index,
    "detect": cmd_detect,
    "args": cmd_args,
    "link": cmd_link,
    "e2e": cmd_e2e,
    "score": cmd_score,
    "stats": cmd_stats,
}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    # every option defaults to None so unset flags never override the config file
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("common")
    g.add_argument("--config", help="JSON file with run settings; flags override it")
    g.add_argument("--codebook", help="codebook JSON (default: the bundled codebook)")
    g.add_argument("--corpus", help="corpus / documents JSONL")
    g.add_argument("--split", choices=("train", "dev", "test"), help="only use documents from this split")
    g.add_argument("--out", help="output path (stdout for JSON reports when omitted)")
    g.add_argument("--strict", action="store_true", default=None, help="abort on invalid input; exit 1 on per-document errors")
    g.add_argument("-v", "--verbose", action="count", default=0)

    llm = argparse.ArgumentParser(add_help=False)
    g = llm.add_argument_group("models")
    g.add_argument("--entities", help="entity database JSONL")
    g.add_argument("--index", help="entity index JSON built by 'aee index'")
    g.add_argument("--cache-dir", dest="cache_dir", help="response cache directory")
    g.add_argument("--no-cache", dest="no_cache", action="store_true", default=None)
    g.add_argument("--workers", type=int)
    g.add_argument("--chat-model", dest="chat_model")
    g.add_argument("--embed-model", dest="embed_model")
    g.add_argument("--embedder", choices=("hashing", "gateway"))
    g.add_argument("--embed-dim", dest="embed_dim", type=int)
    g.add_argument("--mock", action="append", help="scripted transcript JSONL replacing the chat endpoint (repeatable)")
    g.add_argument("--k-per-query", dest="k_per_query", type=int)
    g.add_argument("--max-candidates", dest="max_candidates", type=int)
    g.add_argument("--max-queries", dest="max_queries", type=int)
    g.add_argument("--max-repairs", dest="max_repairs", type=int)

    parser = argparse.ArgumentParser(prog="aee", description="Abstractive event extraction toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("index", parents=[common, llm], help="embed the entity database into an index file")
    sub.add_parser("detect", parents=[common, llm], help="event type detection")
    sub.add_parser("args", parents=[common, llm], help="non-entity argument extraction under gold types")
    sub.add_parser("link", parents=[common, llm], help="entity linking under gold types")
    p = sub.add_parser("e2e", parents=[common, llm], help="full pipeline")
    p.add_argument("--gold-type", dest="gold_type", action="store_true", default=None, help="skip detection and use gold types")

    p = sub.add_parser("score", parents=[common], help="score predictions against gold")
    p.add_argument("--task", choices=("ed", "aeae", "ael", "e2e"), required=True)
    p.add_argument("--predictions", help="predictions JSONL")
    p.add_argument("--entities", help="entity database, enables seen/unseen/generic/specific rows")
    p.add_argument("--csv", help="also write the breakdown table as CSV")
    p.add_argument("--geocode-cache", dest="geocode_cache")
    p.add_argument("--geocoder", choices=("offline", "live"))
    p.add_argument("--user-agent", dest="user_agent", help="required for live geocoding")
    p.add_argument("--case-insensitive-text", dest="case_insensitive_text", action="store_true", default=None)

    p = sub.add_parser("stats", parents=[common], help="corpus statistics and Hill numbers")
    p.add_argument("--round", action="store_true", default=None, help="round Hill numbers to one decimal")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose + 1, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except KeyboardInterrupt:
        logger.error("interrupted")
        return EXIT_INTERRUPTED
    except (ConfigError, OSError, ValueError, RuntimeError) as exc:
        logger.error("%s", exc)
        return EXIT_HARD_ERROR


if __name__ == "__main__":
    sys.exit(main())
