from __future__ import annotations

import socket
from importlib import resources
from pathlib import Path

import pytest

from aee.codebook import load_codebook
from aee.corpus import load_corpus
from aee.entity_db import EntityIndex, load_entities

DATA = Path(str(resources.files("aee.data")))


def pytest_addoption(parser):
    parser.addoption("--live", action="store_true", help="run tests that talk to real services")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--live"):
        return
    skip = pytest.mark.skip(reason="live test; pass --live to run")
    for item in items:
        if "live" in item.keywords:
            item.add_marker(skip)


class _NoNetwork(socket.socket):
    def connect(self, *args, **kwargs):
        raise OSError("network access is disabled in tests")

    def connect_ex(self, *args, **kwargs):
        raise OSError("network access is disabled in tests")


@pytest.fixture(autouse=True)
def no_network(request, monkeypatch):
    if "live" in request.keywords:
        yield
        return
    monkeypatch.setattr(socket, "socket", _NoNetwork)
    monkeypatch.setattr(socket, "create_connection", lambda *a, **k: (_ for _ in ()).throw(OSError("network disabled")))
    yield


@pytest.fixture(scope="session")
def data_dir() -> Path:
    return DATA


@pytest.fixture(scope="session")
def cb():
    return load_codebook()


@pytest.fixture(scope="session")
def mini_corpus(cb):
    return load_corpus(DATA / "mini_corpus.jsonl", cb, strict=True)


@pytest.fixture(scope="session")
def worked(cb):
    return load_corpus(DATA / "worked_corpus.jsonl", cb, strict=True)[0]


@pytest.fixture(scope="session")
def mini_entities():
    return load_entities(DATA / "mini_entities.jsonl")


@pytest.fixture(scope="session")
def mini_index():
    return EntityIndex.load(DATA / "mini_index.json")
