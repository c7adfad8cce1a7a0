"""Remote face-verification client.

Talks to a comparison service over HTTP: ``POST /v1/compare`` with two
base64 PNG images and a bearer token, answered by a confidence in [0, 100].
Transient failures (429/5xx, dropped connections) are retried with
exponential backoff; auth failures and timeouts surface as distinct errors.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import requests
import torch
from requests.adapters import HTTPAdapter
from urllib3.exceptions import ReadTimeoutError
from urllib3.util.retry import Retry

from src.config import VERIFY_TIMEOUT, VERIFY_TOKEN, VERIFY_URL
from src.exceptions import (
    VerificationAuthError,
    VerificationProtocolError,
    VerificationTimeoutError,
    VerificationUnavailableError,
)
from src.images import encode_b64

logger = logging.getLogger(__name__)

ATTEMPTS = 3
RETRY_STATUSES = (429, 500, 502, 503, 504)


@dataclass
class VerificationResponse:
    confidence: float
    latency_ms: float
    provider_id: str

    def __post_init__(self):
        if not math.isfinite(self.confidence) or not 0.0 <= self.confidence <= 100.0:
            raise VerificationProtocolError(f"Confidence {self.confidence!r} is outside [0, 100]")


@dataclass
class VerificationClient:
    base_url: str = field(default_factory=lambda: VERIFY_URL)
    token: str = field(default_factory=lambda: VERIFY_TOKEN)
    timeout: float = field(default_factory=lambda: VERIFY_TIMEOUT)
    backoff: float = 0.5

    _session: requests.Session | None = field(default=None, repr=False)

    def __enter__(self):
        self.start()
        return self

    def __exit__(self, *args):
        self.stop()

    def start(self):
        session = requests.Session()
        retry = Retry(
            total=ATTEMPTS - 1,
            connect=ATTEMPTS - 1,
            read=ATTEMPTS - 1,
            status=ATTEMPTS - 1,
            backoff_factor=self.backoff,
            status_forcelist=list(RETRY_STATUSES),
            allowed_methods=frozenset(["GET", "POST"]),
            raise_on_status=False,
        )
        adapter = HTTPAdapter(max_retries=retry)
        session.mount("https://", adapter)
        session.mount("http://", adapter)
        session.headers.update({"Accept": "application/json"})
        if self.token:
            session.headers["Authorization"] = f"Bearer {self.token}"
        self._session = session
        logger.info("Verification session started for %s", self.base_url)

    def stop(self):
        if self._session:
            self._session.close()
            self._session = None
            logger.info("Verification session stopped")

    @property
    def session(self) -> requests.Session:
        if self._session is None:
            self.start()
        return self._session

    def _url(self, path: str) -> str:
        return f"{self.base_url.rstrip('/')}{path}"

    def _request(self, method: str, path: str, **kwargs) -> requests.Response:
        try:
            resp = self.session.request(method, self._url(path), timeout=self.timeout, **kwargs)
        except requests.Timeout as exc:
            raise VerificationTimeoutError(f"{method} {path} timed out after {self.timeout}s") from exc
        except requests.ConnectionError as exc:
            reason = getattr(exc.args[0], "reason", None) if exc.args else None
            if isinstance(reason, ReadTimeoutError):
                raise VerificationTimeoutError(f"{method} {path} timed out after {self.timeout}s") from exc
            raise VerificationUnavailableError(f"{method} {path} failed after {ATTEMPTS} attempts: {exc}") from exc
        except requests.RequestException as exc:
            raise VerificationUnavailableError(f"{method} {path} failed: {exc}") from exc

        if resp.status_code in (401, 403):
            raise VerificationAuthError(f"{method} {path} rejected the credentials (HTTP {resp.status_code})")
        if resp.status_code in RETRY_STATUSES:
            raise VerificationUnavailableError(
                f"{method} {path} still failing after {ATTEMPTS} attempts (HTTP {resp.status_code})"
            )
        if resp.status_code != 200:
            raise VerificationProtocolError(f"{method} {path} answered HTTP {resp.status_code}")
        return resp

    def connect(self) -> bool:
        """Check that the service is up and accepts the token."""
        resp = self._request("GET", "/v1/health")
        logger.info("Connected to verification service %s", self.base_url)
        return resp.status_code == 200

    def compare(self, image_a: torch.Tensor, image_b: torch.Tensor) -> VerificationResponse:
        payload = {"image_a": encode_b64(image_a), "image_b": encode_b64(image_b)}
        started = time.perf_counter()
        resp = self._request("POST", "/v1/compare", json=payload)
        latency = (time.perf_counter() - started) * 1000.0
        try:
            body = resp.json()
        except ValueError as exc:
            raise VerificationProtocolError(f"Response is not JSON: {resp.text[:80]!r}") from exc
        if not isinstance(body, dict):
            raise VerificationProtocolError("Response body must be a JSON object")
        confidence = body.get("confidence")
        provider = body.get("provider_id")
        if isinstance(confidence, bool) or not isinstance(confidence, (int, float)) or not isinstance(provider, str):
            raise VerificationProtocolError(f"Response lacks a numeric confidence or a provider_id: {body!r}")
        result = VerificationResponse(float(confidence), latency, provider)
        logger.debug("compare -> %.2f from %s in %.1f ms", result.confidence, provider, latency)
        return result


def verify_remote(client: VerificationClient, image_a: torch.Tensor, image_b: torch.Tensor) -> VerificationResponse:
    return client.compare(image_a, image_b)
