"""In-process mock of the verification service.

Scores pairs with a local toy embedder: confidence = 50 * (1 + cos). A
failure script injects behaviour per ``/v1/compare`` request, consumed in
order: an int answers with that HTTP status, ``"malformed"`` returns a
non-JSON body, ``("delay", seconds)`` sleeps before answering normally.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from collections import deque
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any

from src.exceptions import ConfigError
from src.images import decode_b64
from src.recognition.surrogates import FeatureExtractor, ToyLinearEmbedder, cosine_similarity

logger = logging.getLogger(__name__)

PROVIDER_ID = "mock-toy"


class MockVerificationServer:
    def __init__(
        self,
        token: str = "",
        embedder: FeatureExtractor | None = None,
        host: str = "127.0.0.1",
        port: int = 0,
    ):
        self.token = token
        self.embedder = embedder or ToyLinearEmbedder(model_id="mock-fr", seed=9000)
        self.compare_calls = 0
        self._script: deque[Any] = deque()
        self._lock = threading.Lock()
        self._httpd = ThreadingHTTPServer((host, port), self._handler_class())
        self._httpd.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def script(self, *actions: Any) -> None:
        with self._lock:
            self._script.extend(actions)

    def _next_action(self) -> Any:
        with self._lock:
            self.compare_calls += 1
            return self._script.popleft() if self._script else None

    def start(self) -> "MockVerificationServer":
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        logger.info("Mock verification service on %s", self.url)
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread:
            self._thread.join(timeout=5)

    def __enter__(self):
        return self.start()

    def __exit__(self, *args):
        self.stop()

    def score(self, payload: dict[str, Any]) -> float:
        a = decode_b64(payload["image_a"])
        b = decode_b64(payload["image_b"])
        sim = cosine_similarity(self.embedder.extract(a), self.embedder.extract(b))
        return min(100.0, max(0.0, 50.0 * (1.0 + sim)))

    def _handler_class(self):
        server = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, fmt, *args):
                logger.debug("mock: " + fmt, *args)

            def _send(self, status: int, body: bytes, content_type: str = "application/json") -> None:
                self.send_response(status)
                self.send_header("Content-Type", content_type)
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def _json(self, status: int, doc: dict[str, Any]) -> None:
                self._send(status, json.dumps(doc).encode("utf-8"))

            def _authorized(self) -> bool:
                if not server.token:
                    return True
                return self.headers.get("Authorization") == f"Bearer {server.token}"

            def do_GET(self):
                if self.path != "/v1/health":
                    self._json(404, {"error": "not found"})
                elif not self._authorized():
                    self._json(401, {"error": "unauthorized"})
                else:
                    self._json(200, {"status": "ok", "provider_id": PROVIDER_ID})

            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                raw = self.rfile.read(length)
                if self.path != "/v1/compare":
                    self._json(404, {"error": "not found"})
                    return
                if not self._authorized():
                    self._json(401, {"error": "unauthorized"})
                    return
                action = server._next_action()
                if isinstance(action, tuple) and action[0] == "delay":
                    time.sleep(float(action[1]))
                elif action == "malformed":
                    self._send(200, b"<html>not json</html>", "text/html")
                    return
                elif isinstance(action, int):
                    self._json(action, {"error": f"scripted status {action}"})
                    return
                try:
                    confidence = server.score(json.loads(raw))
                except (KeyError, ValueError, ConfigError) as exc:
                    self._json(400, {"error": str(exc)})
                    return
                self._json(200, {"confidence": confidence, "provider_id": PROVIDER_ID})

        return Handler
