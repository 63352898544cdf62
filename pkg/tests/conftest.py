from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest


class LocalServer:
    """Tiny JSON-over-POST server; each test plugs in its own handler."""

    def __init__(self):
        self.requests: list[tuple[str, dict, dict]] = []
        self.handler = lambda path, body: (404, {"error": "no handler"})
        outer = self

        class _Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(length) or b"{}")
                headers = {k: v for k, v in self.headers.items()}
                outer.requests.append((self.path, body, headers))
                status, payload = outer.handler(self.path, body)
                data = json.dumps(payload).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self.thread.start()

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address
        return f"http://{host}:{port}"

    def close(self):
        self.httpd.shutdown()
        self.httpd.server_close()


@pytest.fixture
def local_server():
    server = LocalServer()
    yield server
    server.close()


def whitespace_tokens(text: str) -> list[str]:
    """Greedy split keeping separators attached, mimicking subword offsets."""
    tokens = []
    current = ""
    for ch in text:
        if ch.isspace():
            current += ch
        else:
            if current and current[-1].isspace():
                tokens.append(current)
                current = ""
            current += ch
    if current:
        tokens.append(current)
    return tokens


def echo_response(prompt: str, top_k: int = 0) -> dict:
    """OpenAI-completions-style echo payload with offsets and logprobs."""
    tokens = whitespace_tokens(prompt)
    offsets = []
    pos = 0
    for t in tokens:
        offsets.append(pos)
        pos += len(t)
    logprobs = [None] + [-0.5 - (i % 3) * 0.25 for i in range(1, len(tokens))]
    tops = [None] + [
        {tokens[i]: logprobs[i], " other": logprobs[i] - 1.0} for i in range(1, len(tokens))
    ]
    return {
        "choices": [
            {
                "text": prompt,
                "logprobs": {
                    "tokens": tokens,
                    "token_logprobs": logprobs,
                    "text_offset": offsets,
                    "top_logprobs": tops,
                },
            }
        ]
    }
