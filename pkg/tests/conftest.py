"""Shared fixtures: word lists, a naive matching oracle, an HTTP stub server."""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

WORDS = [
    "walrus", "lighthouse", "violin", "cactus", "lantern", "meadow", "anchor",
    "bakery", "canyon", "dolphin", "engine", "falcon", "garden", "harbor",
    "island", "jacket", "kitten", "ladder", "mirror", "needle", "orchard",
    "puzzle", "quarry", "rocket", "saddle", "temple", "umbrella", "valley",
    "wagon", "xylophone", "yacht", "zeppelin", "bridge", "castle", "desert",
    "eagle", "forest", "glacier", "hammock", "iceberg", "jungle", "kettle",
    "lagoon", "mountain", "notebook", "ocean", "palace", "quilt", "river",
    "statue", "tunnel", "unicorn", "volcano", "windmill", "yarn", "zebra",
    "acorn", "balloon", "compass", "drum", "easel", "fountain", "guitar",
    "helmet", "ivy", "jar", "kite", "lemon", "mosaic", "nest", "owl",
    "piano", "quill", "raft", "sled", "tent", "urn", "vase", "whale",
    "apron", "basket", "candle", "daisy", "envelope", "fern", "globe",
    "harp", "inkwell", "jewel", "koala", "lotus", "mango", "napkin",
    "opal", "pearl", "quartz", "ribbon", "shell", "turtle", "velvet",
]


def naive_boundary_scan(text: str, patterns: dict[int, str], word_boundary: bool = True) -> set[int]:
    """Independent O(n*m) matching oracle: per-pattern find loop with
    explicit boundary checks. Deliberately shares no code with the
    automaton beyond the normalization contract, which tests apply
    themselves before calling."""
    found = set()
    for pid, pat in patterns.items():
        if not pat:
            continue
        start = 0
        while True:
            idx = text.find(pat, start)
            if idx == -1:
                break
            end = idx + len(pat)
            if not word_boundary:
                found.add(pid)
                break
            left = idx == 0 or not text[idx - 1].isalnum()
            right = end == len(text) or not text[end].isalnum()
            if left and right:
                found.add(pid)
                break
            start = idx + 1
    return found


class _StubHandler(BaseHTTPRequestHandler):
    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        body = self.rfile.read(length)
        try:
            payload = json.loads(body)
        except json.JSONDecodeError:
            payload = body
        self.server.requests.append({"path": self.path, "payload": payload})
        status, content_type, data = self.server.responder(payload)
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


class StubServer:
    """Tiny local HTTP server; tests set `responder` to script replies."""

    def __init__(self):
        self._httpd = HTTPServer(("127.0.0.1", 0), _StubHandler)
        self._httpd.requests = []
        self._httpd.responder = self._default
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()

    @staticmethod
    def _default(payload):
        data = json.dumps({"choices": [{"message": {"content": "ok"}}]}).encode()
        return 200, "application/json", data

    @property
    def url(self) -> str:
        return f"http://127.0.0.1:{self._httpd.server_port}/v1"

    @property
    def requests(self) -> list[dict]:
        return self._httpd.requests

    def set_responder(self, fn):
        self._httpd.responder = fn

    def close(self):
        self._httpd.shutdown()
        self._httpd.server_close()


@pytest.fixture
def stub_server():
    server = StubServer()
    yield server
    server.close()
