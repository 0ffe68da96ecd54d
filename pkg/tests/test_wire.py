"""External wire contracts, exercised against in-process servers."""

from __future__ import annotations

import json
import sys
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from ehrrag.embeddings import HttpEmbeddingProvider, embed
from ehrrag.errors import AuthError, ProviderUnavailable
from ehrrag.linker import HttpLinker, SubprocessLinker
from ehrrag.llm import ChatGateway, ChatRequest, OpenAICompatProvider


@pytest.fixture()
def http_server():
    handlers = {}

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            length = int(self.headers.get("Content-Length", 0))
            body = json.loads(self.rfile.read(length) or b"{}")
            status, payload = handlers["post"](self.path, body, dict(self.headers))
            data = json.dumps(payload).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def log_message(self, *args):
            pass

    server = HTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    base = f"http://127.0.0.1:{server.server_address[1]}"
    yield handlers, base
    server.shutdown()


def test_embedding_wire_contract(http_server):
    handlers, base = http_server
    received = []

    def post(path, body, headers):
        received.append(body)
        return 200, {"vectors": [[1.0, 0.0, 0.0] for _ in body["inputs"]]}

    handlers["post"] = post
    provider = HttpEmbeddingProvider(f"{base}/embed", dims=3)
    matrix = embed(["some passage"], "passage", provider)
    assert matrix.shape == (1, 3)
    assert received[0] == {"inputs": ["some passage"], "kind": "passage"}
    embed(["a query"], "query", provider)
    assert received[1]["kind"] == "query"
    assert received[1]["inputs"][0].startswith("Represent this sentence")


def test_embedding_wire_bad_response(http_server):
    handlers, base = http_server
    handlers["post"] = lambda path, body, headers: (200, {"vectors": []})
    provider = HttpEmbeddingProvider(f"{base}/embed", dims=3)
    with pytest.raises(ProviderUnavailable):
        embed(["text"], "passage", provider)


def test_embedding_wire_unreachable():
    provider = HttpEmbeddingProvider("http://127.0.0.1:1/embed", dims=3, timeout=0.2)
    with pytest.raises(ProviderUnavailable):
        embed(["text"], "passage", provider)


def test_openai_compat_success(http_server, monkeypatch):
    handlers, base = http_server
    captured = {}

    def post(path, body, headers):
        captured.update(body=body, path=path, auth=headers.get("Authorization"))
        return 200, {"choices": [{"message": {"content": "the answer"}}],
                     "usage": {"prompt_tokens": 9, "completion_tokens": 2}}

    handlers["post"] = post
    monkeypatch.setenv("EHRRAG_TESTPROV_KEY", "sekret")
    provider = OpenAICompatProvider("testprov", base)
    gateway = ChatGateway(provider)
    response = gateway.complete(ChatRequest("testprov", "model-x", "prompt text",
                                            temperature=0.0, max_output_tokens=64))
    assert response.text == "the answer"
    assert response.input_tokens == 9
    assert captured["path"] == "/chat/completions"
    assert captured["auth"] == "Bearer sekret"
    assert captured["body"]["model"] == "model-x"
    assert captured["body"]["messages"] == [{"role": "user", "content": "prompt text"}]


def test_openai_compat_auth_error(http_server, monkeypatch):
    handlers, base = http_server
    handlers["post"] = lambda p, b, h: (401, {"error": "bad key"})
    monkeypatch.setenv("EHRRAG_TESTPROV_KEY", "wrong")
    gateway = ChatGateway(OpenAICompatProvider("testprov", base))
    with pytest.raises(AuthError):
        gateway.complete(ChatRequest("testprov", "m", "p"))


def test_openai_compat_missing_key(monkeypatch):
    monkeypatch.delenv("EHRRAG_TESTPROV_KEY", raising=False)
    gateway = ChatGateway(OpenAICompatProvider("testprov", "http://127.0.0.1:1"))
    with pytest.raises(AuthError):
        gateway.complete(ChatRequest("testprov", "m", "p"))


def test_openai_compat_retries_on_500(http_server, monkeypatch):
    handlers, base = http_server
    hits = []

    def post(path, body, headers):
        hits.append(1)
        if len(hits) < 2:
            return 503, {"error": "overloaded"}
        return 200, {"choices": [{"message": {"content": "ok"}}]}

    handlers["post"] = post
    monkeypatch.setenv("EHRRAG_TESTPROV_KEY", "k")
    gateway = ChatGateway(OpenAICompatProvider("testprov", base),
                          max_retries=2, backoff_s=0.001)
    assert gateway.complete(ChatRequest("testprov", "m", "p")).text == "ok"
    assert len(hits) == 2


LINKER_CHILD = """
import json, sys
table = {"septic shock": ["R6521"], "acute kidney injury": ["N17.9"]}
for line in sys.stdin:
    request = json.loads(line)
    codes = table.get(request["text"].lower(), [])
    sys.stdout.write(json.dumps({"codes": codes}) + "\\n")
    sys.stdout.flush()
"""


def test_subprocess_linker(tmp_path):
    child = tmp_path / "linker_child.py"
    child.write_text(LINKER_CHILD, encoding="utf-8")
    linker = SubprocessLinker([sys.executable, str(child)])
    try:
        assert linker.link("Septic shock") == frozenset({"R6521"})
        assert linker.link("acute kidney injury") == frozenset({"N179"})  # dots stripped
        assert linker.link("unknown thing") == frozenset()
    finally:
        linker.close()


def test_http_linker(http_server):
    handlers, base = http_server

    def post(path, body, headers):
        codes = ["J18.9"] if body["text"] == "pneumonia" else []
        return 200, {"codes": codes}

    handlers["post"] = post
    linker = HttpLinker(f"{base}/link")
    assert linker.link("pneumonia") == frozenset({"J189"})
    assert linker.link("nothing") == frozenset()
