"""Streaming chat-completions client with client-side stop tags."""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from typing import Any

import httpx

from ..protocol import StreamScanner, tokenize
from .base import AuthError, BackendFailure, GenerationRequest, GenerationResult, finalize


class _Incomplete(Exception):
    pass


@dataclass
class HttpBackend:
    """Client for an OpenAI-style ``/chat/completions`` endpoint with ``stream: true``.

    Organizer continuations are sent as a trailing partial assistant message.
    Stop tags are detected locally by scanning the deltas, so servers need no
    stop-sequence support.
    """

    endpoint_url: str
    auth_token: str | None = None
    model_name: str = "default"
    sampling_params: dict[str, Any] = field(default_factory=dict)
    timeout: float = 60.0
    max_retries: int = 3
    backoff: float = 0.5
    max_backoff: float = 8.0
    max_inflight: int = 8
    concurrent: bool = True
    transport: httpx.BaseTransport | None = None

    def __post_init__(self):
        self._gate = threading.BoundedSemaphore(self.max_inflight)
        headers = {"Authorization": f"Bearer {self.auth_token}"} if self.auth_token else {}
        self._client = httpx.Client(timeout=self.timeout, headers=headers, transport=self.transport)

    def close(self):
        self._client.close()

    def _body(self, request: GenerationRequest) -> dict:
        messages = [{"role": "user", "content": request.prompt}]
        if request.context:
            messages.append({"role": "assistant", "content": request.context})
        return {"model": self.model_name, "messages": messages, "stream": True, **self.sampling_params}

    def _stream_once(self, request: GenerationRequest) -> str:
        scanner = StreamScanner(request.role, request.syntax)
        stops = set(request.stop_conditions)
        text = ""
        with self._client.stream("POST", self.endpoint_url, json=self._body(request)) as resp:
            if resp.status_code in (401, 403):
                raise AuthError(f"endpoint rejected credentials (HTTP {resp.status_code})")
            if resp.status_code >= 500 or resp.status_code == 429:
                raise _Incomplete(f"HTTP {resp.status_code}")
            if resp.status_code >= 400:
                raise BackendFailure(f"HTTP {resp.status_code}: {resp.read()[:200]!r}")
            for line in resp.iter_lines():
                if not line.startswith("data:"):
                    continue
                data = line[5:].strip()
                if data == "[DONE]":
                    return text
                try:
                    choice = json.loads(data)["choices"][0]
                except (ValueError, KeyError, IndexError) as exc:
                    raise _Incomplete(f"bad stream chunk: {exc}") from exc
                delta = (choice.get("delta") or {}).get("content") or ""
                text += delta
                if any(ev.kind in stops for ev in scanner.feed(delta)):
                    return text
                if len(tokenize(text, request.weigher)) > request.max_steps:
                    return text
                if choice.get("finish_reason"):
                    return text
        raise _Incomplete("stream ended before completion")

    def generate(self, request: GenerationRequest) -> GenerationResult:
        attempt = 0
        with self._gate:
            while True:
                try:
                    text = self._stream_once(request)
                    return finalize(text, request, request.stream_handle, retries=attempt)
                except (httpx.TransportError, _Incomplete) as exc:
                    if attempt >= self.max_retries:
                        raise BackendFailure(f"giving up after {attempt} retries: {exc}", retries=attempt) from exc
                    time.sleep(min(self.max_backoff, self.backoff * 2**attempt))
                    attempt += 1
