"""Minimal chat-completions client shared by the runner, text generators and
the LLM report backend."""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import httpx

from .errors import EndpointError, EndpointUnreachable

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ChatReply:
    content: str
    usage: Mapping[str, int] | None = None
    raw: Mapping[str, Any] = field(default_factory=dict)


def reply_from_json(body: Mapping[str, Any]) -> ChatReply:
    """Extract ``choices[0].message.content`` and ``usage`` from a reply body."""
    try:
        content = body["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        content = ""
    if isinstance(content, list):  # content-part replies
        content = "".join(p.get("text", "") for p in content if isinstance(p, Mapping))
    usage = body.get("usage") if isinstance(body, Mapping) else None
    return ChatReply(content or "", usage if isinstance(usage, Mapping) else None, body)


@dataclass
class RetryPolicy:
    retries: int = 3
    backoff: float = 0.5
    max_backoff: float = 8.0

    def delay(self, attempt: int) -> float:
        return min(self.backoff * (2 ** attempt), self.max_backoff)


def with_retries(fn, policy: RetryPolicy, what: str = "request"):
    """Call ``fn`` retrying on :class:`EndpointError` and :class:`EndpointUnreachable`."""
    attempt = 0
    while True:
        try:
            return fn()
        except (EndpointError, EndpointUnreachable) as exc:
            if attempt >= policy.retries:
                raise
            wait = policy.delay(attempt)
            logger.warning("%s failed (%s); retry %d/%d in %.2fs", what, exc, attempt + 1, policy.retries, wait)
            time.sleep(wait)
            attempt += 1


class ChatClient:
    """POSTs chat-completions requests to ``{base_url}/chat/completions``."""

    def __init__(self, base_url: str, model: str, api_key_env: str | None = None,
                 timeout: float = 60.0, retry: RetryPolicy | None = None,
                 transport: httpx.BaseTransport | None = None):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.retry = retry or RetryPolicy()
        self._transport = transport

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.api_key_env:
            key = os.environ.get(self.api_key_env)
            if key:
                headers["Authorization"] = f"Bearer {key}"
        return headers

    def post(self, request: Mapping[str, Any]) -> ChatReply:
        body = dict(request)
        body.setdefault("model", self.model)

        def once() -> ChatReply:
            try:
                with httpx.Client(timeout=self.timeout, transport=self._transport) as client:
                    resp = client.post(f"{self.base_url}/chat/completions", json=body, headers=self._headers())
            except (httpx.ConnectError, httpx.ConnectTimeout) as exc:
                raise EndpointUnreachable(f"{self.base_url}: {exc}") from exc
            except httpx.HTTPError as exc:
                raise EndpointError(f"{self.base_url}: {exc}") from exc
            if resp.status_code == 429 or resp.status_code >= 500:
                raise EndpointError(f"{self.base_url}: HTTP {resp.status_code}")
            if resp.status_code >= 400:
                # client errors are not retried
                return ChatReply("", None, {"error": f"HTTP {resp.status_code}", "body": resp.text[:500]})
            try:
                return reply_from_json(resp.json())
            except ValueError as exc:
                raise EndpointError(f"{self.base_url}: invalid JSON reply") from exc

        return with_retries(once, self.retry, what=f"POST {self.base_url}")

    def complete(self, messages: Sequence[Mapping[str, Any]], temperature: float = 0.0,
                 max_tokens: int = 512) -> ChatReply:
        return self.post({"model": self.model, "messages": list(messages),
                          "temperature": temperature, "max_tokens": max_tokens})
