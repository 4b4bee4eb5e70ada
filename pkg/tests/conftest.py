from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer
from pathlib import Path

import pytest

from eda_loop.backend import Design, MockBackend, MockModelParams, load_design

DATA_DIR = Path(__file__).parent / "data"
DESIGNS_DIR = DATA_DIR / "designs"
REPO_ROOT = Path(__file__).parent.parent
CORPUS_DIR = REPO_ROOT / "docs" / "corpus"


@pytest.fixture
def toy_design() -> Design:
    return load_design(DESIGNS_DIR / "toy.v")


@pytest.fixture
def and2_design() -> Design:
    return load_design(DESIGNS_DIR / "and2.json")


@pytest.fixture
def mock_params() -> MockModelParams:
    return MockModelParams(base_area_um2=5000.0, base_delay_ns=2.00)


@pytest.fixture
def mock_backend(mock_params) -> MockBackend:
    return MockBackend(mock_params)


# The three-chunk retrieval corpus used across docstore and server tests.
EXAMPLE_CORPUS = (
    ("buffering", "buffer insertion improves timing"),
    ("remap", "area recovery via remapping"),
    ("cts", "clock tree synthesis"),
)


@pytest.fixture
def example_corpus_dir(tmp_path: Path) -> Path:
    corpus = tmp_path / "corpus"
    corpus.mkdir()
    for name, text in EXAMPLE_CORPUS:
        (corpus / f"{name}.txt").write_text(text, encoding="utf-8")
    return corpus


# Stub chat-completions endpoint used by advisor and acceptance tests.

RESPONSE_SCRIPT = ("+read_constr,${sdc_file};strash;${abc_rf};dch;"
                   "map -B 0.87;buffer -c -N ... -m")

MODEL_RESPONSE = (
    "Recommended strategy:\n\n"
    "Tighten the mapper balance while keeping constraint-driven buffering.\n\n"
    "```\n" + RESPONSE_SCRIPT + "\n```\n"
)


class _StubHandler(BaseHTTPRequestHandler):
    def do_POST(self):
        server = self.server
        length = int(self.headers.get("Content-Length", "0"))
        body = json.loads(self.rfile.read(length)) if length else {}
        server.requests.append({
            "path": self.path,
            "auth": self.headers.get("Authorization", ""),
            "body": body,
        })
        reply = server.replies[min(len(server.requests) - 1, len(server.replies) - 1)]
        payload = json.dumps(
            {"choices": [{"message": {"role": "assistant", "content": reply}}]}
        ).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture
def stub_endpoint():
    server = HTTPServer(("127.0.0.1", 0), _StubHandler)
    server.requests = []
    server.replies = [MODEL_RESPONSE]
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield server
    server.shutdown()
    thread.join()
