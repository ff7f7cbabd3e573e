"""Local stand-in for a chat-completion endpoint, used by tests and offline demos."""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Sequence


class FakeChatServer:
    """Serves ``POST /chat/completions`` from a canned reply list or a function.

    ``replies`` may be a sequence of message contents (served in order, the
    last one repeated) or a callable taking the decoded request body. Every
    received body and Authorization header is recorded in ``requests``.
    ``status`` forces an error status code for every request.
    """

    def __init__(self, replies: Sequence[str] | Callable[[dict], str], status: int = 200):
        self.replies = replies
        self.status = status
        self.requests: list[dict] = []
        self._lock = threading.Lock()
        self._server: ThreadingHTTPServer | None = None
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def _next_reply(self, body: dict) -> str:
        if callable(self.replies):
            return self.replies(body)
        with self._lock:
            i = min(len(self.requests) - 1, len(self.replies) - 1)
        return self.replies[i]

    def _handler(self):
        fake = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                try:
                    body = json.loads(self.rfile.read(length) or b"{}")
                except ValueError:
                    body = {}
                with fake._lock:
                    fake.requests.append({
                        "path": self.path,
                        "body": body,
                        "authorization": self.headers.get("Authorization"),
                    })
                if self.path.rstrip("/") != "/chat/completions":
                    self._send(404, {"error": "not found"})
                elif fake.status != 200:
                    self._send(fake.status, {"error": "forced failure"})
                else:
                    content = fake._next_reply(body)
                    self._send(200, {
                        "id": f"fake-{len(fake.requests)}",
                        "object": "chat.completion",
                        "model": body.get("model", "fake"),
                        "choices": [{
                            "index": 0,
                            "message": {"role": "assistant", "content": content},
                            "finish_reason": "stop",
                        }],
                    })

            def _send(self, status, payload):
                data = json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        return Handler

    def start(self) -> "FakeChatServer":
        self._server = ThreadingHTTPServer(("127.0.0.1", 0), self._handler())
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
            self._server = None

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
