from __future__ import annotations

import json

import pytest

from aee.cli import load_predictions, main
from aee.corpus import load_corpus

import oracle


@pytest.fixture()
def paths(data_dir, tmp_path):
    return {
        "corpus": str(data_dir / "mini_corpus.jsonl"),
        "entities": str(data_dir / "mini_entities.jsonl"),
        "index": str(data_dir / "mini_index.json"),
        "mock": str(data_dir / "mini_transcript.jsonl"),
        "geo": str(data_dir / "geocode_fixture.json"),
        "tmp": tmp_path,
    }


def llm_flags(p, *extra):
    return ["--corpus", p["corpus"], "--entities", p["entities"], "--index", p["index"], "--mock", p["mock"], "--no-cache", *extra]


def read_jsonl(path):
    return [json.loads(line) for line in open(path, encoding="utf-8") if line.strip()]


def test_index_reproduces_bundled_index(paths):
    out = paths["tmp"] / "idx.json"
    assert main(["index", "--entities", paths["entities"], "--out", str(out)]) == 0
    assert json.loads(out.read_text()) == json.loads(open(paths["index"]).read())


@pytest.mark.parametrize("command", ["detect", "args", "link", "e2e"])
def test_batch_commands(paths, command):
    out = paths["tmp"] / f"{command}.jsonl"
    assert main([command, *llm_flags(paths), "--out", str(out)]) == 0
    rows = read_jsonl(out)
    assert [r["doc_id"] for r in rows] == [f"mini-{i:03d}" for i in range(1, 26)]
    assert len({r["config_hash"] for r in rows}) == 1
    assert not any(r.get("errors") for r in rows)
    if command in ("link", "e2e"):
        assert len(read_jsonl(out.with_name(f"{command}.trace.jsonl"))) == 25


def test_rerun_is_byte_identical(paths):
    a, b = paths["tmp"] / "w1" / "p.jsonl", paths["tmp"] / "w8" / "p.jsonl"
    assert main(["e2e", *llm_flags(paths), "--out", str(a), "--workers", "1"]) == 0
    assert main(["e2e", *llm_flags(paths), "--out", str(b), "--workers", "8"]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert a.with_name("p.trace.jsonl").read_bytes() == b.with_name("p.trace.jsonl").read_bytes()


def test_score_matches_oracle(paths, cb):
    pred = paths["tmp"] / "e2e.jsonl"
    assert main(["e2e", *llm_flags(paths), "--out", str(pred)]) == 0
    golds = load_corpus(paths["corpus"], cb)
    preds = load_predictions(pred)
    for task in ("ed", "e2e"):
        rep = paths["tmp"] / f"{task}.json"
        assert main(["score", "--task", task, "--corpus", paths["corpus"], "--predictions", str(pred), "--out", str(rep)]) == 0
        o = json.loads(rep.read_text())["overall"]
        assert (o["tp"], o["fp"], o["fn"]) == oracle.score(task, golds, preds, cb)


def test_score_ael_subsets_and_csv(paths):
    pred = paths["tmp"] / "link.jsonl"
    assert main(["link", *llm_flags(paths), "--out", str(pred)]) == 0
    rep, csv = paths["tmp"] / "ael.json", paths["tmp"] / "ael.csv"
    argv = ["score", "--task", "ael", "--corpus", paths["corpus"], "--split", "test", "--predictions", str(pred),
            "--entities", paths["entities"], "--out", str(rep), "--csv", str(csv)]
    assert main(argv) == 0
    d = json.loads(rep.read_text())
    assert {"seen", "unseen", "generic", "specific"} <= set(d["by_subset"])
    assert csv.read_text().startswith("task,group,")


def test_score_with_geocode_cache(paths):
    pred = paths["tmp"] / "e2e.jsonl"
    main(["e2e", *llm_flags(paths), "--out", str(pred)])
    rep = paths["tmp"] / "r.json"
    assert main(["score", "--task", "e2e", "--corpus", paths["corpus"], "--predictions", str(pred),
                 "--geocode-cache", paths["geo"], "--out", str(rep)]) == 0
    assert json.loads(rep.read_text())["meta"]["unresolved_locations"] == 1


def test_stats(paths, capsys):
    assert main(["stats", "--corpus", paths["corpus"], "--round"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert d["total"] == 25
    h = d["hill_number"]["overall"]
    assert h == round(h, 1)


def test_config_file_and_flag_precedence(paths):
    cfg = paths["tmp"] / "run.json"
    cfg.write_text(json.dumps({"corpus": paths["corpus"], "entities": paths["entities"], "index": paths["index"],
                               "mock": [paths["mock"]], "no_cache": True, "max_queries": 1}))
    a, b = paths["tmp"] / "a.jsonl", paths["tmp"] / "b.jsonl"
    assert main(["detect", "--config", str(cfg), "--out", str(a)]) == 0
    assert main(["detect", "--config", str(cfg), "--out", str(b), "--max-queries", "20"]) == 0
    assert read_jsonl(a)[0]["config_hash"] != read_jsonl(b)[0]["config_hash"]
    cfg.write_text(json.dumps({"bogus_key": 1}))
    assert main(["detect", "--config", str(cfg), "--out", str(a)]) == 2


def test_missing_inputs_exit_2(paths):
    assert main(["detect", "--out", str(paths["tmp"] / "x.jsonl")]) == 2
    assert main(["score", "--task", "ed", "--corpus", paths["corpus"]]) == 2
    assert main(["score", "--task", "ed", "--corpus", str(paths["tmp"] / "nope.jsonl"), "--predictions", "x"]) == 2


def test_strict_per_document_errors(paths, data_dir):
    # worked transcript does not cover the mini corpus, so every document fails
    argv = ["detect", "--corpus", paths["corpus"], "--mock", str(data_dir / "worked_transcript.jsonl"), "--no-cache",
            "--out", str(paths["tmp"] / "x.jsonl")]
    assert main(argv) == 0
    rows = read_jsonl(paths["tmp"] / "x.jsonl")
    assert len(rows) == 25 and all(r["errors"] for r in rows)
    assert main([*argv, "--strict"]) == 1


def test_split_filter(paths):
    out = paths["tmp"] / "d.jsonl"
    assert main(["detect", *llm_flags(paths), "--split", "dev", "--out", str(out)]) == 0
    assert len(read_jsonl(out)) == 5
