"""Committee access layer: chat and image calls over HTTP or scripted backends.

Every model the pipeline talks to sits behind a :class:`ModelGateway`, which
adds retry with exponential backoff, per-endpoint rate limiting, and timeouts.
Scripted backends are deterministic stand-ins keyed by request tag, used for
tests and replayable desk-scale runs.
"""
from __future__ import annotations

import base64
import hashlib
import logging
import os
import random
import re
import struct
import threading
import time
import uuid
import zlib
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import requests

logger = logging.getLogger(__name__)

CHAT = "chat_multimodal"
IMAGE = "image_generation"

BACKOFF_BASE_S = 1.0
BACKOFF_FACTOR = 2.0
BACKOFF_CAP_S = 30.0
RATE_WINDOW_S = 60.0


class GatewayError(Exception):
    """Base class for model-gateway failures."""


class ExhaustedRetries(GatewayError):
    """Every attempt against an endpoint failed."""


class Timeout(ExhaustedRetries):
    """Every attempt failed and the last failure was a timeout."""


class MalformedResponse(ExhaustedRetries):
    """Every attempt failed and the last response had no usable body."""


class GenerationRefused(GatewayError):
    """The backend declined to render the prompt. Never retried."""


class ParseError(GatewayError):
    """A scripted-backend file does not parse."""


class _TransientFailure(Exception):
    """One attempt failed but a retry may succeed. Internal to this module."""

    def __init__(self, message: str, kind: str = "error"):
        super().__init__(message)
        self.kind = kind  # "error" | "timeout" | "malformed"


@dataclass(frozen=True)
class ModelEndpoint:
    """One committee member or image generator behind the gateway."""

    model_id: str
    kind: str  # CHAT or IMAGE
    backend: str  # "http" or "scripted"
    base_url: str | None = None
    script_path: str | None = None
    max_retries: int = 2
    timeout: float = 60.0
    rate_limit: int | None = None  # requests per minute; None disables limiting
    api_key_env: str | None = None

    def __post_init__(self) -> None:
        if not self.model_id:
            raise ValueError("endpoint needs a model_id")
        if self.kind not in (CHAT, IMAGE):
            raise ValueError(f"endpoint {self.model_id}: unknown kind {self.kind!r}")
        if self.backend == "http":
            if not self.base_url:
                raise ValueError(f"endpoint {self.model_id}: http backend requires base_url")
            if self.script_path:
                raise ValueError(f"endpoint {self.model_id}: http backend must not set script_path")
        elif self.backend == "scripted":
            if not self.script_path:
                raise ValueError(f"endpoint {self.model_id}: scripted backend requires script_path")
            if self.base_url:
                raise ValueError(f"endpoint {self.model_id}: scripted backend must not set base_url")
        else:
            raise ValueError(f"endpoint {self.model_id}: unknown backend {self.backend!r}")
        if self.max_retries < 0:
            raise ValueError(f"endpoint {self.model_id}: max_retries must be >= 0")
        if self.timeout <= 0:
            raise ValueError(f"endpoint {self.model_id}: timeout must be > 0")


@dataclass(frozen=True)
class ChatRequest:
    """One chat call: a system prompt plus ordered text/image parts.

    ``request_tag`` is the deterministic lookup key for scripted backends;
    live backends ignore it.
    """

    system_prompt: str
    user_parts: tuple[tuple[str, str], ...]  # ("text", body) | ("image", path)
    temperature: float = 1.0
    request_tag: str = ""

    def __post_init__(self) -> None:
        if not self.user_parts:
            raise ValueError("user_parts must be non-empty")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")
        for part_kind, value in self.user_parts:
            if part_kind == "image":
                if not Path(value).is_file():
                    raise ValueError(f"image part does not resolve to a file: {value}")
            elif part_kind != "text":
                raise ValueError(f"unknown part kind {part_kind!r}")

    def text(self) -> str:
        """All text parts joined; what a prompt capture records."""
        return "\n".join(value for part_kind, value in self.user_parts if part_kind == "text")


@dataclass(frozen=True)
class ChatResponse:
    model_id: str
    text: str
    latency: float
    attempt_count: int


@dataclass(frozen=True)
class ImageRequest:
    prompt: str
    request_tag: str = ""  # scripted lookup key; defaults to a prompt digest

    def __post_init__(self) -> None:
        if not self.prompt.strip():
            raise ValueError("image prompt must be non-empty")


@dataclass(frozen=True)
class ImageResult:
    model_id: str
    path: str  # relative to the asset store root
    content_hash: str


def content_digest(content: bytes) -> str:
    """Stable digest of image bytes."""
    return hashlib.sha256(content).hexdigest()


def deterministic_png(key: str) -> bytes:
    """A tiny valid PNG whose pixels are a pure function of the input string."""
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    size = 8
    rows = b""
    for y in range(size):
        rows += b"\x00"  # scanline filter: none
        for x in range(size):
            base = (y * size + x) * 3
            rows += bytes(digest[(base + c) % len(digest)] for c in range(3))

    def chunk(kind: bytes, data: bytes) -> bytes:
        return (
            struct.pack(">I", len(data))
            + kind
            + data
            + struct.pack(">I", zlib.crc32(kind + data))
        )

    header = struct.pack(">IIBBBBB", size, size, 8, 2, 0, 0, 0)
    return (
        b"\x89PNG\r\n\x1a\n"
        + chunk(b"IHDR", header)
        + chunk(b"IDAT", zlib.compress(rows))
        + chunk(b"IEND", b"")
    )


class AssetStore:
    """Content-addressed image storage under ``root/images``."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        (self.root / "images").mkdir(parents=True, exist_ok=True)

    def put(self, content: bytes, ext: str = ".png") -> tuple[str, str]:
        """Store bytes; returns (relative path, content hash)."""
        digest = content_digest(content)
        rel = f"images/{digest}{ext}"
        path = self.root / rel
        if not path.exists():
            tmp = self.root / f"images/.tmp-{digest}-{uuid.uuid4().hex}"
            tmp.write_bytes(content)
            os.replace(tmp, path)
        return rel, digest

    def resolve(self, rel: str) -> Path:
        return self.root / rel


@dataclass(frozen=True)
class _Behavior:
    action: str  # "ok" | "fail" | "refuse"
    fail_count: int = 0
    text: str = ""


class ScriptedBackend:
    """Deterministic stand-in for a live endpoint, keyed by request tag.

    File format: one record per line, ``TAG<TAB>BEHAVIOR``. BEHAVIOR is one of
    ``ok:<text>``, ``fail:<n>:<text>`` (n transient failures, then success) or
    ``refuse``. ``#`` starts a comment, blank lines are skipped, encoding is
    UTF-8. A ``*`` tag, if present, answers any tag with no exact entry.
    ``\\n`` in <text> stands for a newline.

    Responses are a pure function of (request_tag, attempt index): replaying a
    run against the same script yields byte-identical responses.
    """

    def __init__(self, behaviors: dict[str, _Behavior], path: str):
        self._behaviors = behaviors
        self.path = path

    @classmethod
    def load(cls, path: str | Path) -> "ScriptedBackend":
        path = Path(path)
        if not path.is_file():
            raise ParseError(f"{path}: script file does not exist")
        behaviors: dict[str, _Behavior] = {}
        with open(path, encoding="utf-8") as handle:
            for lineno, raw in enumerate(handle, 1):
                line = raw.rstrip("\n")
                stripped = line.strip()
                if not stripped or stripped.startswith("#"):
                    continue
                if "\t" not in line:
                    raise ParseError(f"{path}:{lineno}: expected TAG<TAB>BEHAVIOR")
                tag, behavior = line.split("\t", 1)
                tag = tag.strip()
                behavior = behavior.strip()
                if not tag:
                    raise ParseError(f"{path}:{lineno}: empty tag")
                if tag in behaviors:
                    raise ParseError(f"{path}:{lineno}: duplicate tag {tag!r}")
                behaviors[tag] = cls._parse_behavior(behavior, path, lineno)
        return cls(behaviors, str(path))

    @staticmethod
    def _parse_behavior(behavior: str, path: Path, lineno: int) -> _Behavior:
        if behavior == "refuse":
            return _Behavior("refuse")
        if behavior.startswith("ok:"):
            return _Behavior("ok", text=_unescape(behavior[3:]))
        if behavior.startswith("fail:"):
            pieces = behavior.split(":", 2)
            if len(pieces) != 3 or not pieces[1].isdigit() or int(pieces[1]) < 1:
                raise ParseError(f"{path}:{lineno}: fail needs the form fail:<n>:<text>")
            return _Behavior("fail", fail_count=int(pieces[1]), text=_unescape(pieces[2]))
        raise ParseError(f"{path}:{lineno}: unknown behavior {behavior.split(':', 1)[0]!r}")

    def _lookup(self, tag: str) -> _Behavior:
        found = self._behaviors.get(tag)
        if found is None:
            found = self._behaviors.get("*")
        if found is None:
            raise _TransientFailure(f"script {self.path} has no entry for tag {tag!r}")
        return found

    def _common(self, tag: str, attempt: int) -> _Behavior:
        behavior = self._lookup(tag)
        if behavior.action == "refuse":
            raise GenerationRefused(f"scripted refusal for tag {tag!r}")
        if behavior.action == "fail" and attempt <= behavior.fail_count:
            raise _TransientFailure(
                f"scripted failure {attempt}/{behavior.fail_count} for tag {tag!r}"
            )
        return behavior

    def respond_text(self, tag: str, attempt: int) -> str:
        behavior = self._common(tag, attempt)
        if not behavior.text:
            raise _TransientFailure(f"scripted empty body for tag {tag!r}", "malformed")
        return behavior.text

    def respond_image(self, tag: str, attempt: int, prompt: str) -> bytes:
        """Image bytes for a tag: a fixture file (``@path``, relative to the
        script), or a PNG derived from the behavior text, or from the prompt
        itself when the text is empty."""
        behavior = self._common(tag, attempt)
        if behavior.text.startswith("@"):
            fixture = Path(self.path).parent / behavior.text[1:]
            if not fixture.is_file():
                raise _TransientFailure(f"fixture file missing: {fixture}")
            return fixture.read_bytes()
        return deterministic_png(behavior.text or prompt)


def _unescape(text: str) -> str:
    return text.replace("\\n", "\n").replace("\\t", "\t")


def load_script(path: str | Path) -> ScriptedBackend:
    """Parse a scripted-backend file; raises ParseError with a line number."""
    return ScriptedBackend.load(path)


def default_key_env(model_id: str) -> str:
    """Environment variable holding the API key for a live endpoint."""
    return "CADS_" + re.sub(r"[^A-Za-z0-9]", "_", model_id).upper() + "_API_KEY"


class _RateLimiter:
    """Sliding-window limiter: at most ``limit`` dispatches in any 60 s window."""

    def __init__(self, limit: int | None, now_fn, sleep_fn):
        self.limit = limit
        self._now = now_fn
        self._sleep = sleep_fn
        self._lock = threading.Lock()
        self._stamps: deque[float] = deque()

    def acquire(self) -> None:
        if not self.limit:
            return
        while True:
            with self._lock:
                now = self._now()
                while self._stamps and self._stamps[0] <= now - RATE_WINDOW_S:
                    self._stamps.popleft()
                if len(self._stamps) < self.limit:
                    self._stamps.append(now)
                    return
                wait = self._stamps[0] + RATE_WINDOW_S - now
            # Sleep outside the lock; re-check on wake since peers race us.
            self._sleep(max(wait, 0.001))


class ModelGateway:
    """Dispatches chat and image calls with retry, backoff and rate limiting.

    Safe for concurrent use from many workers: retry decisions are local to
    each call and rate-limit state is synchronized per endpoint. Responses
    are immutable values.

    ``now_fn`` and ``sleep_fn`` exist so tests can drive time; production
    code leaves the defaults.
    """

    def __init__(
        self,
        asset_store: AssetStore,
        *,
        now_fn=time.monotonic,
        sleep_fn=time.sleep,
        rng: random.Random | None = None,
    ):
        self.assets = asset_store
        self._now = now_fn
        self._sleep = sleep_fn
        self._rng = rng or random.Random()
        self._lock = threading.Lock()
        self._limiters: dict[str, _RateLimiter] = {}
        self._scripts: dict[str, ScriptedBackend] = {}
        self._session = requests.Session()

    # -- shared plumbing ----------------------------------------------------

    def _limiter(self, endpoint: ModelEndpoint) -> _RateLimiter:
        with self._lock:
            limiter = self._limiters.get(endpoint.model_id)
            if limiter is None:
                limiter = _RateLimiter(endpoint.rate_limit, self._now, self._sleep)
                self._limiters[endpoint.model_id] = limiter
            return limiter

    def _script(self, endpoint: ModelEndpoint) -> ScriptedBackend:
        assert endpoint.script_path is not None
        with self._lock:
            script = self._scripts.get(endpoint.script_path)
            if script is None:
                script = load_script(endpoint.script_path)
                self._scripts[endpoint.script_path] = script
            return script

    def _backoff(self, attempt: int) -> float:
        # Full jitter over an exponential schedule.
        cap = min(BACKOFF_CAP_S, BACKOFF_BASE_S * BACKOFF_FACTOR ** (attempt - 1))
        return self._rng.uniform(0.0, cap)

    def _with_retry(self, endpoint: ModelEndpoint, attempt_fn):
        limiter = self._limiter(endpoint)
        last: _TransientFailure | None = None
        for attempt in range(1, endpoint.max_retries + 2):
            limiter.acquire()
            try:
                return attempt_fn(attempt), attempt
            except _TransientFailure as failure:
                last = failure
                logger.debug(
                    "%s: attempt %d/%d failed: %s",
                    endpoint.model_id, attempt, endpoint.max_retries + 1, failure,
                )
                # Scripted backends simulate; only live calls pay backoff.
                if attempt <= endpoint.max_retries and endpoint.backend == "http":
                    self._sleep(self._backoff(attempt))
        message = (
            f"{endpoint.model_id}: all {endpoint.max_retries + 1} attempts failed: {last}"
        )
        if last is not None and last.kind == "timeout":
            raise Timeout(message)
        if last is not None and last.kind == "malformed":
            raise MalformedResponse(message)
        raise ExhaustedRetries(message)

    def _headers(self, endpoint: ModelEndpoint) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        env = endpoint.api_key_env or default_key_env(endpoint.model_id)
        key = os.environ.get(env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    # -- chat ----------------------------------------------------------------

    def chat(self, endpoint: ModelEndpoint, req: ChatRequest) -> ChatResponse:
        """First successful completion, retrying transient failures.

        Raises ExhaustedRetries / Timeout / MalformedResponse when every
        attempt fails, GenerationRefused when the backend declines.
        """
        if endpoint.kind != CHAT:
            raise ValueError(f"endpoint {endpoint.model_id} is not a chat endpoint")
        started = self._now()
        text, attempts = self._with_retry(
            endpoint, lambda attempt: self._chat_once(endpoint, req, attempt)
        )
        return ChatResponse(
            model_id=endpoint.model_id,
            text=text,
            latency=self._now() - started,
            attempt_count=attempts,
        )

    def _chat_once(self, endpoint: ModelEndpoint, req: ChatRequest, attempt: int) -> str:
        if endpoint.backend == "scripted":
            return self._script(endpoint).respond_text(req.request_tag, attempt)
        return self._http_chat(endpoint, req)

    def _http_chat(self, endpoint: ModelEndpoint, req: ChatRequest) -> str:
        content: list[dict] = []
        for part_kind, value in req.user_parts:
            if part_kind == "text":
                content.append({"type": "text", "text": value})
            else:
                encoded = base64.b64encode(Path(value).read_bytes()).decode("ascii")
                content.append(
                    {"type": "image_url",
                     "image_url": {"url": f"data:image/png;base64,{encoded}"}}
                )
        messages: list[dict] = []
        if req.system_prompt:
            messages.append({"role": "system", "content": req.system_prompt})
        messages.append({"role": "user", "content": content})
        payload = {
            "model": endpoint.model_id,
            "messages": messages,
            "temperature": req.temperature,
        }
        assert endpoint.base_url is not None
        url = endpoint.base_url.rstrip("/") + "/chat/completions"
        try:
            resp = self._session.post(
                url, json=payload, headers=self._headers(endpoint), timeout=endpoint.timeout
            )
        except requests.Timeout as exc:
            raise _TransientFailure(f"timeout after {endpoint.timeout}s", "timeout") from exc
        except requests.RequestException as exc:
            raise _TransientFailure(str(exc)) from exc
        if resp.status_code != 200:
            raise _TransientFailure(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            text = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise _TransientFailure(f"unexpected response shape: {exc}", "malformed") from exc
        if not isinstance(text, str) or not text.strip():
            raise _TransientFailure("empty response body", "malformed")
        return text

    # -- images ----------------------------------------------------------------

    def generate_image(self, endpoint: ModelEndpoint, req: ImageRequest) -> ImageResult:
        """Render the prompt, store the bytes, return the asset reference."""
        if endpoint.kind != IMAGE:
            raise ValueError(f"endpoint {endpoint.model_id} is not an image endpoint")
        tag = req.request_tag or content_digest(req.prompt.encode("utf-8"))[:16]
        if endpoint.backend == "scripted":
            content, _ = self._with_retry(
                endpoint,
                lambda attempt: self._script(endpoint).respond_image(tag, attempt, req.prompt),
            )
        else:
            content, _ = self._with_retry(
                endpoint, lambda attempt: self._http_image(endpoint, req)
            )
        rel, digest = self.assets.put(content)
        return ImageResult(model_id=endpoint.model_id, path=rel, content_hash=digest)

    def _http_image(self, endpoint: ModelEndpoint, req: ImageRequest) -> bytes:
        payload = {"model": endpoint.model_id, "prompt": req.prompt, "response_format": "b64_json"}
        assert endpoint.base_url is not None
        url = endpoint.base_url.rstrip("/") + "/images/generations"
        try:
            resp = self._session.post(
                url, json=payload, headers=self._headers(endpoint), timeout=endpoint.timeout
            )
        except requests.Timeout as exc:
            raise _TransientFailure(f"timeout after {endpoint.timeout}s", "timeout") from exc
        except requests.RequestException as exc:
            raise _TransientFailure(str(exc)) from exc
        if resp.status_code != 200:
            body = resp.text[:500]
            if "content_policy" in body or "refused" in body.lower():
                raise GenerationRefused(f"{endpoint.model_id} declined the prompt: {body[:200]}")
            raise _TransientFailure(f"HTTP {resp.status_code}: {body[:200]}")
        try:
            encoded = resp.json()["data"][0]["b64_json"]
            return base64.b64decode(encoded)
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise _TransientFailure(f"unexpected response shape: {exc}", "malformed") from exc
