"""Uniform client for chat-completion endpoints that accept text and image parts.

One client serves all pipeline roles (question generator, answerer, LaTeX
converter, judge).  Requests go out in the common chat-completions JSON
shape; transient failures are retried with exponential backoff, a sliding
window enforces a per-minute request budget, and every attempt lands in an
audit log keyed by a request hash (never the payload, never a secret).
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import httpx

_ROLES = ("system", "user", "assistant")


class GatewayError(Exception):
    pass


class Exhausted(GatewayError):
    """All retry attempts failed on transient errors."""


class PermanentRejection(GatewayError):
    """The endpoint rejected the request with a non-retryable status."""

    def __init__(self, status_code: int, body: str = ""):
        super().__init__(f"endpoint returned {status_code}: {body[:200]}")
        self.status_code = status_code


class OversizedPayload(GatewayError):
    """Image payload exceeds the configured size limit."""


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    data: bytes
    media_type: str = "image/png"


@dataclass
class ChatMessage:
    role: str
    parts: list

    def __post_init__(self):
        if self.role not in _ROLES:
            raise ValueError(f"role must be one of {_ROLES}, got {self.role!r}")


def text_message(role: str, text: str) -> ChatMessage:
    return ChatMessage(role=role, parts=[TextPart(text)])


@dataclass
class ChatRequest:
    model_id: str
    messages: list[ChatMessage]
    max_output_tokens: int = 1024
    temperature: float = 0.0

    def __post_init__(self):
        n_images = sum(
            isinstance(p, ImagePart) for m in self.messages for p in m.parts
        )
        if n_images > 1:
            raise ValueError(f"at most one image part per request, got {n_images}")

    def image_bytes(self) -> int:
        return sum(
            len(p.data) for m in self.messages for p in m.parts if isinstance(p, ImagePart)
        )


@dataclass
class ChatResponse:
    text: str
    finish_reason: str
    usage: dict
    latency_ms: int


@dataclass
class RetryPolicy:
    max_attempts: int = 3
    backoff_base_s: float = 0.5
    backoff_factor: float = 2.0

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.backoff_factor < 1.0:
            raise ValueError("backoff must be non-decreasing (factor >= 1)")


@dataclass
class EndpointConfig:
    base_url: str
    model_id: str = ""
    auth_env: str | None = None  # env var NAME holding the token
    timeout_s: float = 60.0
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    rate_limit_per_min: int | None = None
    max_image_bytes: int = 20 * 1024 * 1024

    def __post_init__(self):
        if self.timeout_s <= 0:
            raise ValueError("timeout must be positive")


def build_wire_request(request: ChatRequest) -> dict:
    """Encode a request in the chat-completions JSON shape with typed content parts."""
    messages = []
    for msg in request.messages:
        if len(msg.parts) == 1 and isinstance(msg.parts[0], TextPart):
            content = msg.parts[0].text
        else:
            content = []
            for part in msg.parts:
                if isinstance(part, TextPart):
                    content.append({"type": "text", "text": part.text})
                elif isinstance(part, ImagePart):
                    b64 = base64.b64encode(part.data).decode("ascii")
                    content.append(
                        {
                            "type": "image_url",
                            "image_url": {"url": f"data:{part.media_type};base64,{b64}"},
                        }
                    )
                else:
                    raise TypeError(f"unsupported message part {type(part)!r}")
        messages.append({"role": msg.role, "content": content})
    return {
        "model": request.model_id,
        "messages": messages,
        "max_tokens": request.max_output_tokens,
        "temperature": request.temperature,
    }


def parse_wire_response(data: dict) -> tuple[str, str, dict]:
    try:
        choice = data["choices"][0]
        text = choice["message"]["content"] or ""
        finish = choice.get("finish_reason") or "stop"
    except (KeyError, IndexError, TypeError) as exc:
        raise GatewayError(f"malformed completion response: {exc}") from exc
    return text, finish, data.get("usage", {})


class RateLimiter:
    """Sliding-window limiter: at most ``per_minute`` acquisitions in any 60 s span."""

    def __init__(self, per_minute: int, clock=time.monotonic, sleep=time.sleep):
        if per_minute < 1:
            raise ValueError("rate limit must be >= 1/min")
        self.per_minute = per_minute
        self._clock = clock
        self._sleep = sleep
        self._sent: deque[float] = deque()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                while self._sent and now - self._sent[0] >= 60.0:
                    self._sent.popleft()
                if len(self._sent) < self.per_minute:
                    self._sent.append(now)
                    return
                wait = 60.0 - (now - self._sent[0])
            self._sleep(max(wait, 0.0))


class AuditLog:
    """Thread-safe append-only attempt log; optionally mirrored to an NDJSON file."""

    def __init__(self, path: str | Path | None = None):
        self.entries: list[dict] = []
        self._path = Path(path) if path else None
        self._lock = threading.Lock()

    def record(self, **entry) -> None:
        with self._lock:
            self.entries.append(entry)
            if self._path:
                with self._path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry, sort_keys=True) + "\n")


class ChatClient:
    """Shareable, synchronized client for one endpoint."""

    def __init__(
        self,
        config: EndpointConfig,
        *,
        transport: httpx.BaseTransport | None = None,
        clock=time.monotonic,
        sleep=time.sleep,
        audit: AuditLog | None = None,
        dry_run: bool = False,
    ):
        self.config = config
        self.audit = audit if audit is not None else AuditLog()
        self.dry_run = dry_run
        self._sleep = sleep
        self._clock = clock
        self._limiter = (
            RateLimiter(config.rate_limit_per_min, clock=clock, sleep=sleep)
            if config.rate_limit_per_min
            else None
        )
        self._http = httpx.Client(transport=transport, timeout=config.timeout_s)

    def close(self) -> None:
        self._http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.config.auth_env:
            token = os.environ.get(self.config.auth_env, "")
            if token:
                headers["Authorization"] = f"Bearer {token}"
        return headers

    def complete(self, request: ChatRequest) -> ChatResponse:
        """Send one chat request, retrying transient failures per the policy."""
        if request.image_bytes() > self.config.max_image_bytes:
            raise OversizedPayload(
                f"image payload {request.image_bytes()} B over limit {self.config.max_image_bytes} B"
            )
        body = json.dumps(build_wire_request(request), sort_keys=True)
        req_hash = hashlib.sha256(body.encode("utf-8")).hexdigest()[:16]
        url = self.config.base_url.rstrip("/") + "/chat/completions"

        if self.dry_run:
            self.audit.record(
                request_hash=req_hash, model=request.model_id, attempt=0, status="dry_run", latency_ms=0
            )
            return ChatResponse(text="", finish_reason="dry_run", usage={}, latency_ms=0)

        policy = self.config.retry
        delay = policy.backoff_base_s
        last_error: str = ""
        for attempt in range(1, policy.max_attempts + 1):
            if self._limiter:
                self._limiter.acquire()
            started = self._clock()
            status: str
            retryable = False
            try:
                response = self._http.post(url, content=body, headers=self._headers())
                status = str(response.status_code)
                if response.status_code < 300:
                    text, finish, usage = parse_wire_response(response.json())
                    latency = int((self._clock() - started) * 1000)
                    self.audit.record(
                        request_hash=req_hash,
                        model=request.model_id,
                        attempt=attempt,
                        status=status,
                        latency_ms=latency,
                    )
                    return ChatResponse(text=text, finish_reason=finish, usage=usage, latency_ms=latency)
                retryable = response.status_code == 429 or response.status_code >= 500
                last_error = f"HTTP {response.status_code}"
            except httpx.TimeoutException:
                status = "timeout"
                retryable = True
                last_error = "timeout"
            except httpx.TransportError as exc:
                status = "transport_error"
                retryable = True
                last_error = f"transport error: {exc}"
            latency = int((self._clock() - started) * 1000)
            self.audit.record(
                request_hash=req_hash,
                model=request.model_id,
                attempt=attempt,
                status=status,
                latency_ms=latency,
            )
            if not retryable:
                raise PermanentRejection(int(status), response.text)
            if attempt < policy.max_attempts:
                self._sleep(delay)
                delay *= policy.backoff_factor
        raise Exhausted(f"{policy.max_attempts} attempts failed; last: {last_error}")
