"""Chat-completion transport: HTTP and mock backends, response cache, grade extraction."""

from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
import time
from concurrent.futures import Future
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol, Sequence

import httpx

from .trec_io import JudgmentSet, read_qrels

log = logging.getLogger(__name__)


class LLMError(RuntimeError):
    pass


class TransportError(LLMError):
    """Network failure, timeout, or retryable HTTP status that outlived the retry budget."""


class ProtocolError(LLMError):
    def __init__(self, status: int, body: str):
        self.status = status
        self.body = body
        super().__init__(f"HTTP {status}: {body[:200]}")


class DecodeError(LLMError):
    pass


class ScriptedMissError(LLMError):
    pass


class _Retryable(Exception):
    pass


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    system_message: str
    user_message: str
    temperature: float = 0.0
    max_tokens: int = 100
    # routing hints for mock scripts; not part of the cache key
    meta: Mapping[str, Any] = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")


@dataclass(frozen=True)
class ChatResponse:
    raw_text: str
    model_id: str
    cached: bool = False
    attempts: int = 0


def prompt_digest(system_message: str, user_message: str) -> str:
    """Hash of the rendered prompt alone, independent of model and sampling settings."""
    payload = json.dumps([system_message, user_message], ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def cache_key(req: ChatRequest) -> str:
    payload = json.dumps(
        [req.model_id, req.system_message, req.user_message, repr(float(req.temperature)), req.max_tokens],
        ensure_ascii=False,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


_NUMBER = re.compile(r"\d+(?:\.\d+)?")


def extract_grade(raw_text: str, scale_max: int = 3) -> int | None:
    """First standalone integer in ``0..scale_max``, scanning left to right.

    Multi-digit numbers, decimals and negative numbers are whole tokens and never
    match partially. Returns None when nothing qualifies.
    """
    for m in _NUMBER.finditer(raw_text or ""):
        token = m.group()
        if "." in token:
            continue
        start = m.start()
        if start > 0 and raw_text[start - 1] == "-" and (start < 2 or not raw_text[start - 2].isdigit()):
            continue
        value = int(token)
        if 0 <= value <= scale_max:
            return value
    return None


# ---- backends -----------------------------------------------------------

class Backend(Protocol):
    def send(self, req: ChatRequest) -> str: ...


class OpenAIBackend:
    """OpenAI-compatible ``/chat/completions`` endpoint."""

    def __init__(self, base_url: str, api_key: str | None = None, timeout: float = 60.0,
                 client: httpx.Client | None = None):
        url = base_url.rstrip("/")
        if not url.endswith("/chat/completions"):
            url += "/chat/completions"
        self.url = url
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = client or httpx.Client(timeout=timeout, headers=headers)

    def send(self, req: ChatRequest) -> str:
        body = {
            "model": req.model_id,
            "messages": [
                {"role": "system", "content": req.system_message},
                {"role": "user", "content": req.user_message},
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        }
        try:
            resp = self._client.post(self.url, json=body)
        except httpx.TransportError as exc:
            raise _Retryable(f"{type(exc).__name__}: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise _Retryable(f"HTTP {resp.status_code}: {resp.text[:200]}")
        if not 200 <= resp.status_code < 300:
            raise ProtocolError(resp.status_code, resp.text)
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise DecodeError(f"unexpected response body: {resp.text[:200]}") from exc
        return content if content is not None else ""

    def close(self) -> None:
        self._client.close()


Rule = Callable[[ChatRequest], "str | None"]


class MockBackend:
    """Deterministic offline backend.

    Lookup order: exact prompt digest, then rules (first non-None answer wins),
    then the default text. A miss with no default raises ``ScriptedMissError``.
    """

    def __init__(self, digests: Mapping[str, str] | None = None, rules: Sequence[Rule] = (),
                 default: str | None = None, fail_after: int | None = None):
        self.digests = dict(digests or {})
        self.rules = list(rules)
        self.default = default
        self.fail_after = fail_after
        self.calls = 0
        self._lock = threading.Lock()

    def send(self, req: ChatRequest) -> str:
        with self._lock:
            self.calls += 1
            if self.fail_after is not None and self.calls > self.fail_after:
                raise TransportError(f"mock outage after {self.fail_after} calls")
        digest = prompt_digest(req.system_message, req.user_message)
        if digest in self.digests:
            return self.digests[digest]
        for rule in self.rules:
            answer = rule(req)
            if answer is not None:
                return answer
        if self.default is not None:
            return self.default
        raise ScriptedMissError(f"no scripted answer for prompt {digest[:12]} meta={dict(req.meta)}")

    @classmethod
    def from_script(cls, script: Mapping[str, Any], base_dir: Path | None = None) -> "MockBackend":
        """Build from a JSON mock script.

        Recognised keys: ``default`` (text), ``digests`` ({prompt digest: text}),
        ``rules`` (list of {query_id?, doc_id?, criterion?, phase?, text} matchers),
        ``qrels`` (path; answers with the pair's label), ``echo`` (criterion key whose
        grade is echoed back in the aggregation phase) and ``fail_after`` (int).
        """
        rules: list[Rule] = []
        for spec in script.get("rules", []):
            rules.append(match_rule(spec))
        if "echo" in script:
            rules.append(echo_rule(script["echo"]))
        if "qrels" in script:
            path = Path(script["qrels"])
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            rules.append(planted_rule(read_qrels(path)))
        return cls(
            digests=script.get("digests"),
            rules=rules,
            default=script.get("default"),
            fail_after=script.get("fail_after"),
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "MockBackend":
        path = Path(path)
        return cls.from_script(json.loads(path.read_text(encoding="utf-8")), base_dir=path.parent)


def match_rule(spec: Mapping[str, Any]) -> Rule:
    text = str(spec["text"])
    conditions = {k: v for k, v in spec.items() if k != "text"}

    def rule(req: ChatRequest) -> str | None:
        if all(req.meta.get(k) == v for k, v in conditions.items()):
            return text
        return None

    return rule


def planted_rule(qrels: JudgmentSet) -> Rule:
    """Answer every prompt about (query_id, doc_id) with that pair's label."""

    def rule(req: ChatRequest) -> str | None:
        key = (req.meta.get("query_id"), req.meta.get("doc_id"))
        label = qrels.get(key)  # type: ignore[arg-type]
        return None if label is None else str(label)

    return rule


def echo_rule(criterion_key: str) -> Rule:
    def rule(req: ChatRequest) -> str | None:
        grades = req.meta.get("grades")
        if req.meta.get("phase") == "aggregate" and grades and criterion_key in grades:
            return str(grades[criterion_key])
        return None

    return rule


# ---- cache --------------------------------------------------------------

class ResponseCache:
    """Append-only JSON-lines cache keyed by request digest; last line wins on reload."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._entries: dict[str, str] = {}
        self._lock = threading.Lock()
        self.writes = 0
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self) -> None:
        assert self.path is not None
        raw = self.path.read_bytes()
        lines = raw.split(b"\n")
        for lineno, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                self._entries[obj["digest"]] = obj["raw_text"]
            except (ValueError, KeyError, TypeError):
                if lineno == len(lines):
                    # interrupted append; drop it so later appends start on a clean line
                    log.warning("dropping truncated last line of %s", self.path)
                    with open(self.path, "r+b") as fh:
                        fh.truncate(len(raw) - len(line))
                    continue
                raise LLMError(f"{self.path}: corrupt cache line {lineno}") from None

    def get(self, digest: str) -> str | None:
        with self._lock:
            return self._entries.get(digest)

    def __contains__(self, digest: str) -> bool:
        return self.get(digest) is not None

    def __len__(self) -> int:
        return len(self._entries)

    def put(self, digest: str, model_id: str, raw_text: str) -> bool:
        """Store once per digest; returns False if the digest was already present."""
        with self._lock:
            if digest in self._entries:
                return False
            self._entries[digest] = raw_text
            self.writes += 1
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                line = json.dumps({
                    "digest": digest,
                    "model_id": model_id,
                    "raw_text": raw_text,
                    "created_at": datetime.now(timezone.utc).isoformat(),
                }, ensure_ascii=False)
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(line + "\n")
            return True


class RateLimiter:
    """Token bucket; ``rate`` requests per second with a burst of ``max(1, rate)``."""

    def __init__(self, rate: float, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.rate = rate
        self.capacity = max(1.0, rate)
        self._tokens = self.capacity
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1:
                    self._tokens -= 1
                    return
                wait = (1 - self._tokens) / self.rate
            self._sleep(wait)


class ChatClient:
    """Cached, retrying, rate-limited front end over a backend.

    Concurrent identical requests share one backend call.
    """

    def __init__(self, backend: Backend, cache: ResponseCache | None = None, max_attempts: int = 5,
                 backoff: float = 0.5, max_backoff: float = 30.0, rate_limit: float | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        if max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        self.backend = backend
        self.cache = cache if cache is not None else ResponseCache()
        self.max_attempts = max_attempts
        self.backoff = backoff
        self.max_backoff = max_backoff
        self.limiter = RateLimiter(rate_limit, sleep=sleep) if rate_limit else None
        self._sleep = sleep
        self._inflight: dict[str, Future] = {}
        self._lock = threading.Lock()
        self.backend_calls = 0

    def complete(self, req: ChatRequest) -> ChatResponse:
        key = cache_key(req)
        with self._lock:
            hit = self.cache.get(key)
            if hit is not None:
                return ChatResponse(hit, req.model_id, cached=True)
            fut = self._inflight.get(key)
            owner = fut is None
            if owner:
                fut = Future()
                self._inflight[key] = fut
        if not owner:
            return replace(fut.result(), cached=True, attempts=0)
        try:
            text, attempts = self._call_with_retry(req)
            self.cache.put(key, req.model_id, text)
            resp = ChatResponse(text, req.model_id, cached=False, attempts=attempts)
            fut.set_result(resp)
            return resp
        except BaseException as exc:
            fut.set_exception(exc)
            raise
        finally:
            with self._lock:
                self._inflight.pop(key, None)

    def _call_with_retry(self, req: ChatRequest) -> tuple[str, int]:
        last = ""
        for attempt in range(1, self.max_attempts + 1):
            if self.limiter is not None:
                self.limiter.acquire()
            with self._lock:
                self.backend_calls += 1
            try:
                return self.backend.send(req), attempt
            except _Retryable as exc:
                last = str(exc)
            if attempt < self.max_attempts:
                delay = min(self.max_backoff, self.backoff * 2 ** (attempt - 1))
                log.info("attempt %d failed (%s); retrying in %.2fs", attempt, last, delay)
                self._sleep(delay)
        raise TransportError(f"giving up after {self.max_attempts} attempts: {last}")
