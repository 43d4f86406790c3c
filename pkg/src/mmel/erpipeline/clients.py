"""Knowledge-base page and chat-completion clients: live HTTP and fixture replay.

Fixture files are JSON lines.  KB fixtures record one page per line::

    {"title": "Donald Trump", "extract": "First paragraph.\\n\\nSecond paragraph."}
    {"title": "Nobody In Particular", "missing": true}

Chat fixtures record the exact request messages and the response::

    {"messages": [{"role": "system", "content": "..."}, ...], "response": "..."}
"""
from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol, Sequence, TypeVar, Union

import httpx

log = logging.getLogger(__name__)

T = TypeVar("T")


class _NotFound:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "NOT_FOUND"

    def __bool__(self):
        return False


NOT_FOUND = _NotFound()

Message = dict  # {"role": ..., "content": ...}


class TransportError(RuntimeError):
    """A retryable failure talking to a remote service (network, 429, 5xx)."""


class ClientError(RuntimeError):
    """A non-retryable request failure."""


class FixtureMissError(KeyError):
    """The replayed fixture has no recording for this request."""


class KBPageClient(Protocol):
    def fetch_extract(self, title: str) -> Union[list[str], _NotFound]:
        ...


class LLMClient(Protocol):
    def chat(self, messages: Sequence[Message]) -> str:
        ...


@dataclass(frozen=True)
class RetryPolicy:
    max_retries: int = 3
    backoff_base: float = 0.5
    backoff_max: float = 8.0

    def delay(self, attempt: int) -> float:
        return min(self.backoff_max, self.backoff_base * 2**attempt)


def call_with_retries(fn: Callable[[], T], policy: RetryPolicy, sleep: Callable[[float], None] = time.sleep) -> T:
    for attempt in range(policy.max_retries + 1):
        try:
            return fn()
        except TransportError as exc:
            if attempt == policy.max_retries:
                raise
            delay = policy.delay(attempt)
            log.warning("transient failure (%s); retry %d in %.2fs", exc, attempt + 1, delay)
            sleep(delay)
    raise AssertionError("unreachable")


class RateLimiter:
    """Minimum spacing between calls, shared by all threads using one client."""

    def __init__(self, min_interval: float = 0.0, clock=time.monotonic, sleep=time.sleep):
        self.min_interval = min_interval
        self._clock, self._sleep = clock, sleep
        self._lock = threading.Lock()
        self._next = 0.0

    def wait(self) -> None:
        if self.min_interval <= 0:
            return
        with self._lock:
            now = self._clock()
            if now < self._next:
                self._sleep(self._next - now)
                now = self._next
            self._next = now + self.min_interval


def _check_status(resp: httpx.Response) -> None:
    if resp.status_code == 429 or resp.status_code >= 500:
        raise TransportError(f"HTTP {resp.status_code} from {resp.request.url}")
    if resp.status_code >= 400:
        raise ClientError(f"HTTP {resp.status_code} from {resp.request.url}")


def split_paragraphs(extract: str) -> list[str]:
    """Blank-line separated blocks, stripped, empties dropped."""
    return [p.strip() for p in re.split(r"\n\s*\n", extract) if p.strip()]


class FixtureKBClient:
    def __init__(self, pages: dict[str, Union[str, None]]):
        self._pages = pages
        self.calls: list[str] = []

    @classmethod
    def from_file(cls, path: str | Path) -> "FixtureKBClient":
        pages: dict[str, Union[str, None]] = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    pages[rec["title"]] = None if rec.get("missing") else rec.get("extract", "")
        return cls(pages)

    def fetch_extract(self, title: str):
        self.calls.append(title)
        if title not in self._pages:
            raise FixtureMissError(f"no recorded page for {title!r}")
        extract = self._pages[title]
        return NOT_FOUND if extract is None else split_paragraphs(extract)


class WikipediaClient:
    """Plain-text page extracts from a MediaWiki ``action=query`` endpoint."""

    def __init__(self, endpoint: str = "https://en.wikipedia.org/w/api.php", http: httpx.Client | None = None,
                 retry: RetryPolicy = RetryPolicy(), min_interval: float = 0.1, sleep=time.sleep):
        self.endpoint = endpoint
        self.http = http or httpx.Client(timeout=30.0, headers={"User-Agent": "mmel-er-pipeline/0.1"})
        self.retry = retry
        self.limiter = RateLimiter(min_interval, sleep=sleep)
        self._sleep = sleep

    def _get(self, title: str) -> dict:
        self.limiter.wait()
        params = {
            "action": "query",
            "prop": "extracts",
            "explaintext": 1,
            "redirects": 1,
            "format": "json",
            "formatversion": 2,
            "titles": title,
        }
        try:
            resp = self.http.get(self.endpoint, params=params)
        except httpx.TransportError as exc:
            raise TransportError(str(exc)) from exc
        _check_status(resp)
        return resp.json()

    def fetch_extract(self, title: str):
        data = call_with_retries(lambda: self._get(title), self.retry, self._sleep)
        pages = data.get("query", {}).get("pages", [])
        if not pages or pages[0].get("missing") or pages[0].get("invalid"):
            return NOT_FOUND
        extract = pages[0].get("extract", "")
        # the API separates paragraphs with single newlines and marks headings with '=='
        paras = [line.strip() for line in extract.split("\n")]
        paras = [p for p in paras if p and not p.startswith("==")]
        return paras if paras else NOT_FOUND


def _message_key(messages: Sequence[Message]) -> str:
    return json.dumps([{"role": m["role"], "content": m["content"]} for m in messages], ensure_ascii=False)


class FixtureLLMClient:
    def __init__(self, recordings: dict[str, str]):
        self._recordings = recordings
        self.calls: list[list[Message]] = []

    @classmethod
    def from_file(cls, path: str | Path) -> "FixtureLLMClient":
        recordings = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    recordings[_message_key(rec["messages"])] = rec["response"]
        return cls(recordings)

    def chat(self, messages: Sequence[Message]) -> str:
        self.calls.append([dict(m) for m in messages])
        key = _message_key(messages)
        if key not in self._recordings:
            raise FixtureMissError(f"no recorded response for conversation ending {messages[-1]['content']!r}")
        return self._recordings[key]


class ChatCompletionClient:
    """OpenAI-compatible ``/chat/completions`` client with retry and rate limiting.

    The API key is read from ``MMEL_LLM_API_KEY`` unless passed explicitly.
    """

    def __init__(self, base_url: str, model: str, api_key: str | None = None, http: httpx.Client | None = None,
                 retry: RetryPolicy = RetryPolicy(), min_interval: float = 0.0, temperature: float = 0.0,
                 sleep=time.sleep):
        self.url = base_url.rstrip("/") + "/chat/completions"
        self.model = model
        self.temperature = temperature
        key = api_key if api_key is not None else os.environ.get("MMEL_LLM_API_KEY", "")
        headers = {"Authorization": f"Bearer {key}"} if key else {}
        self.http = http or httpx.Client(timeout=60.0)
        self.headers = headers
        self.retry = retry
        self.limiter = RateLimiter(min_interval, sleep=sleep)
        self._sleep = sleep

    def _post(self, messages: Sequence[Message]) -> str:
        self.limiter.wait()
        body = {"model": self.model, "messages": list(messages), "temperature": self.temperature}
        try:
            resp = self.http.post(self.url, json=body, headers=self.headers)
        except httpx.TransportError as exc:
            raise TransportError(str(exc)) from exc
        _check_status(resp)
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise ClientError(f"unexpected chat response shape: {exc}") from exc

    def chat(self, messages: Sequence[Message]) -> str:
        return call_with_retries(lambda: self._post(messages), self.retry, self._sleep)
