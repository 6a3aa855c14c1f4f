"""Model and tool boundary.

Defines the inference-backend contract with two implementations: a scripted
backend that replays fixture transcripts deterministically (all acceptance
tests run on it), and an HTTP backend speaking the OpenAI-compatible chat
completions dialect with tool calling and retry/backoff. Also hosts the
minimal tool dispatcher (read/write/exec) that confines every effect to a
sandbox directory.
"""

from __future__ import annotations

import json
import math
import os
import random
import subprocess
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol

import yaml

from .errors import (
    BackendUnavailable,
    ExecTimeout,
    FixtureExhausted,
    PathEscape,
    RateLimited,
    UnknownTool,
)


@dataclass(frozen=True)
class ToolCall:
    name: str
    arguments: dict


@dataclass(frozen=True)
class ToolResult:
    content: str
    exit_status: int
    duration: float = 0.0

    @property
    def ok(self) -> bool:
        return self.exit_status == 0


@dataclass(frozen=True)
class ToolDescriptor:
    name: str
    description: str
    parameters: dict


@dataclass(frozen=True)
class Message:
    role: str  # system | user | assistant | tool
    content: str = ""
    tool_calls: tuple[ToolCall, ...] = ()
    tool_call_id: str = ""


@dataclass(frozen=True)
class Usage:
    tokens_in: int
    tokens_out: int


@dataclass(frozen=True)
class InferenceRequest:
    system: str
    messages: tuple[Message, ...]
    tools: tuple[ToolDescriptor, ...] = ()
    max_tokens: int = 4096

    def searchable_text(self) -> str:
        return "\n".join([self.system] + [m.content for m in self.messages])


@dataclass(frozen=True)
class InferenceResponse:
    text: str
    tool_calls: tuple[ToolCall, ...]
    usage: Usage
    finish_reason: str = "stop"


class InferenceBackend(Protocol):
    def complete(self, request: InferenceRequest) -> InferenceResponse: ...


def _estimate_tokens(text: str) -> int:
    return math.ceil(len(text) / 4) if text else 0


# ---------------------------------------------------------------------------
# Scripted backend
# ---------------------------------------------------------------------------

@dataclass
class Fixture:
    key: str  # substring matched against the request text; "" is the default
    turns: list[dict]
    repeat: bool = False


class ScriptedBackend:
    """Deterministic replay backend.

    Each request is routed to the fixture whose key occurs in the request
    text (longest key wins; the empty key is the fallback). The fixture's
    turns are replayed in order; exhaustion raises FixtureExhausted unless
    the fixture is marked repeat. Usage counters are synthesized from text
    lengths, so identical requests always yield identical responses.
    """

    def __init__(self, fixtures: list[Fixture]):
        self._fixtures = sorted(fixtures, key=lambda f: len(f.key), reverse=True)
        self._cursor: dict[str, int] = {}
        self._lock = threading.Lock()  # replay order must stay serial under fan-out
        self.calls = 0

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBackend":
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        fixtures = [
            Fixture(
                key=str(entry.get("key", "")),
                turns=list(entry.get("turns", [])),
                repeat=bool(entry.get("repeat", False)),
            )
            for entry in raw.get("fixtures", [])
        ]
        return cls(fixtures)

    def _route(self, text: str) -> Fixture:
        for fixture in self._fixtures:
            if fixture.key and fixture.key in text:
                return fixture
        for fixture in self._fixtures:
            if not fixture.key:
                return fixture
        raise FixtureExhausted("no fixture matches the request and no default is defined")

    def complete(self, request: InferenceRequest) -> InferenceResponse:
        text = request.searchable_text()
        with self._lock:
            self.calls += 1
            fixture = self._route(text)
            index = self._cursor.get(fixture.key, 0)
            if index >= len(fixture.turns):
                if fixture.repeat and fixture.turns:
                    index = index % len(fixture.turns)
                else:
                    raise FixtureExhausted(
                        f"fixture {fixture.key!r} exhausted after {len(fixture.turns)} turns"
                    )
            self._cursor[fixture.key] = self._cursor.get(fixture.key, 0) + 1
            turn = fixture.turns[index]

        calls = tuple(
            ToolCall(name=str(tc["name"]), arguments=dict(tc.get("arguments", {})))
            for tc in turn.get("tool_calls", [])
        )
        content = str(turn.get("content", "") or "")
        rendered = content + "".join(f"{c.name}{json.dumps(c.arguments, sort_keys=True)}" for c in calls)
        return InferenceResponse(
            text=content,
            tool_calls=calls,
            usage=Usage(_estimate_tokens(text), _estimate_tokens(rendered)),
            finish_reason="tool_calls" if calls else "stop",
        )


# ---------------------------------------------------------------------------
# HTTP backend (OpenAI-compatible chat completions)
# ---------------------------------------------------------------------------

def build_request_payload(request: InferenceRequest, model: str) -> dict:
    """Serialize an InferenceRequest to the chat-completions wire format."""
    messages: list[dict] = []
    if request.system:
        messages.append({"role": "system", "content": request.system})
    for m in request.messages:
        entry: dict = {"role": m.role, "content": m.content}
        if m.tool_calls:
            entry["tool_calls"] = [
                {
                    "id": f"call_{i}",
                    "type": "function",
                    "function": {"name": c.name, "arguments": json.dumps(c.arguments, sort_keys=True)},
                }
                for i, c in enumerate(m.tool_calls)
            ]
        if m.tool_call_id:
            entry["tool_call_id"] = m.tool_call_id
        messages.append(entry)

    payload: dict = {"model": model, "messages": messages, "max_tokens": request.max_tokens}
    if request.tools:
        payload["tools"] = [
            {
                "type": "function",
                "function": {"name": t.name, "description": t.description, "parameters": t.parameters},
            }
            for t in request.tools
        ]
    return payload


def parse_response_payload(data: dict) -> InferenceResponse:
    """Parse a chat-completions response body into an InferenceResponse."""
    choice = (data.get("choices") or [{}])[0]
    message = choice.get("message") or {}
    text = message.get("content") or ""
    calls = []
    for tc in message.get("tool_calls") or []:
        fn = tc.get("function") or {}
        try:
            arguments = json.loads(fn.get("arguments") or "{}")
        except json.JSONDecodeError:
            arguments = {"_raw": fn.get("arguments", "")}
        calls.append(ToolCall(name=str(fn.get("name", "")), arguments=arguments))
    usage = data.get("usage") or {}
    return InferenceResponse(
        text=text,
        tool_calls=tuple(calls),
        usage=Usage(
            int(usage.get("prompt_tokens", _estimate_tokens(text))),
            int(usage.get("completion_tokens", _estimate_tokens(text))),
        ),
        finish_reason=str(choice.get("finish_reason", "stop")),
    )


class SignalSink(Protocol):
    def record_latency(self, milliseconds: float) -> None: ...
    def record_rate_limit(self) -> None: ...


class HttpBackend:
    """Chat-completions client with bounded jittered-backoff retries.

    429 and 5xx class responses are retried idempotently up to `max_retries`;
    429s and response latencies are also reported to the optional signal sink
    so the scheduler can observe provider pressure.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key_env: str = "SKILLC_API_KEY",
        max_retries: int = 3,
        backoff_base: float = 0.5,
        timeout: float = 60.0,
        signal_sink: SignalSink | None = None,
        rng: random.Random | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        import httpx

        self.base_url = base_url.rstrip("/")
        self.model = model
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.signal_sink = signal_sink
        self._rng = rng or random.Random()
        self._sleep = sleep
        headers = {}
        api_key = os.environ.get(api_key_env, "")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = httpx.Client(timeout=timeout, headers=headers)

    def _backoff(self, attempt: int) -> float:
        return self.backoff_base * (2 ** attempt) * (1 + self._rng.random() * 0.25)

    def complete(self, request: InferenceRequest) -> InferenceResponse:
        import httpx

        payload = build_request_payload(request, self.model)
        url = f"{self.base_url}/chat/completions"
        last_error: Exception | None = None

        for attempt in range(self.max_retries + 1):
            start = time.monotonic()
            try:
                response = self._client.post(url, json=payload)
            except httpx.HTTPError as exc:
                last_error = exc
                if attempt < self.max_retries:
                    self._sleep(self._backoff(attempt))
                    continue
                raise BackendUnavailable(f"{url}: {exc}") from exc

            if self.signal_sink is not None:
                self.signal_sink.record_latency((time.monotonic() - start) * 1000.0)

            if response.status_code == 429:
                if self.signal_sink is not None:
                    self.signal_sink.record_rate_limit()
                retry_after = response.headers.get("retry-after")
                if attempt < self.max_retries:
                    self._sleep(float(retry_after) if retry_after else self._backoff(attempt))
                    continue
                raise RateLimited(
                    f"{url}: rate limited after {attempt + 1} attempts",
                    retry_after=float(retry_after) if retry_after else None,
                )
            if response.status_code >= 500:
                last_error = BackendUnavailable(f"{url}: HTTP {response.status_code}")
                if attempt < self.max_retries:
                    self._sleep(self._backoff(attempt))
                    continue
                raise last_error
            if response.status_code >= 400:
                raise BackendUnavailable(f"{url}: HTTP {response.status_code}: {response.text[:200]}")

            return parse_response_payload(response.json())

        raise BackendUnavailable(f"{url}: {last_error}")


# ---------------------------------------------------------------------------
# Tool dispatcher
# ---------------------------------------------------------------------------

BASE_TOOLS = ("read", "write", "exec")

TOOL_DESCRIPTORS = {
    "read": ToolDescriptor(
        name="read",
        description="Read a file from the task sandbox.",
        parameters={"type": "object", "properties": {"path": {"type": "string"}}, "required": ["path"]},
    ),
    "write": ToolDescriptor(
        name="write",
        description="Write content to a file in the task sandbox.",
        parameters={
            "type": "object",
            "properties": {"path": {"type": "string"}, "content": {"type": "string"}},
            "required": ["path", "content"],
        },
    ),
    "exec": ToolDescriptor(
        name="exec",
        description="Run a shell command with the sandbox as working directory.",
        parameters={"type": "object", "properties": {"command": {"type": "string"}}, "required": ["command"]},
    ),
}


class ToolDispatcher:
    """Dispatches read/write/exec calls confined to a sandbox directory.

    Paths are resolved against the sandbox and must stay inside it; exec runs
    with the sandbox as working directory under a wall-clock timeout. Extra
    environment (e.g. SKILL_DIR) is injected into exec'd commands.
    """

    def __init__(
        self,
        sandbox: str | Path,
        exec_timeout: float = 30.0,
        extra_env: dict[str, str] | None = None,
        clock: Callable[[], float] = time.monotonic,
    ):
        self.sandbox = Path(sandbox).resolve()
        self.sandbox.mkdir(parents=True, exist_ok=True)
        self.exec_timeout = exec_timeout
        self.extra_env = dict(extra_env or {})
        self._clock = clock
        self._extra_tools: dict[str, Callable[[dict], ToolResult]] = {}

    def register(self, name: str, handler: Callable[[dict], ToolResult]) -> None:
        self._extra_tools[name] = handler

    @property
    def tool_names(self) -> tuple[str, ...]:
        return BASE_TOOLS + tuple(self._extra_tools)

    def descriptors(self) -> tuple[ToolDescriptor, ...]:
        return tuple(TOOL_DESCRIPTORS[name] for name in BASE_TOOLS)

    def _resolve(self, raw: str) -> Path:
        candidate = (self.sandbox / raw).resolve() if not os.path.isabs(raw) else Path(raw).resolve()
        if candidate != self.sandbox and self.sandbox not in candidate.parents:
            raise PathEscape(f"path {raw!r} leaves the sandbox")
        return candidate

    def dispatch(self, call: ToolCall) -> ToolResult:
        start = self._clock()
        if call.name == "read":
            path = self._resolve(str(call.arguments.get("path", "")))
            if not path.is_file():
                return ToolResult(f"no such file: {call.arguments.get('path')}", 1, self._clock() - start)
            return ToolResult(path.read_text(encoding="utf-8"), 0, self._clock() - start)
        if call.name == "write":
            path = self._resolve(str(call.arguments.get("path", "")))
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(str(call.arguments.get("content", "")), encoding="utf-8")
            return ToolResult("", 0, self._clock() - start)
        if call.name == "exec":
            command = str(call.arguments.get("command", ""))
            env = dict(os.environ, **self.extra_env)
            try:
                proc = subprocess.run(
                    ["sh", "-c", command],
                    cwd=self.sandbox,
                    env=env,
                    capture_output=True,
                    text=True,
                    timeout=self.exec_timeout,
                )
            except subprocess.TimeoutExpired as exc:
                raise ExecTimeout(f"command exceeded {self.exec_timeout}s: {command!r}") from exc
            output = proc.stdout + (("\n" + proc.stderr) if proc.stderr else "")
            return ToolResult(output, proc.returncode, self._clock() - start)
        if call.name in self._extra_tools:
            return self._extra_tools[call.name](call.arguments)
        raise UnknownTool(f"tool {call.name!r} is not registered")
