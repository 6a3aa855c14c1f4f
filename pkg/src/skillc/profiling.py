"""Target capability profiling.

Measures what proficiency level a (model, harness) target attains for each
primitive capability by running microbenchmarks against an inference backend
inside a throwaway sandbox, then caches the resulting profile per
(model, harness, catalog version). Attained level is the highest consecutive
pass from L1; passes above a failure are recorded as inconsistencies, never
used to raise the attained level.
"""

from __future__ import annotations

import json
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable

import yaml

from .backends import (
    InferenceBackend,
    InferenceRequest,
    InferenceResponse,
    Message,
    ToolDispatcher,
    ToolResult,
)
from .catalog import CapabilityCatalog
from .errors import BackendUnavailable, IncompleteBenchmarkSuite, SandboxSetupFailure, SkillcError

BENCH_TURN_LIMIT = 3
VOTES_PER_LEVEL = 3  # bundled suite ships 3 benchmarks per level
PASS_THRESHOLD = 2  # level passes on >= 2 of 3


@dataclass(frozen=True)
class HarnessFeatures:
    tools: frozenset[str] = frozenset({"read", "write", "exec"})
    batch_dispatch: bool = False
    subagent_spawn: bool = False
    context_budget: int = 200_000

    def __post_init__(self):
        missing = {"read", "write", "exec"} - set(self.tools)
        if missing:
            raise SkillcError(f"harness must expose at least read/write/exec; missing {sorted(missing)}")


@dataclass(frozen=True)
class TargetDescriptor:
    model_id: str
    harness_id: str
    features: HarnessFeatures = HarnessFeatures()

    def __post_init__(self):
        if not self.model_id or not self.harness_id:
            raise SkillcError("target model_id and harness_id must be non-empty")

    @property
    def key(self) -> str:
        return f"{_slug(self.model_id)}__{_slug(self.harness_id)}"


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "-", text)


@dataclass(frozen=True)
class Checker:
    """Pure predicate over a benchmark transcript and sandbox state."""

    kind: str  # regex | file_exists | exit_code
    pattern: str = ""
    path: str = ""
    expect: int = 0

    def evaluate(self, transcript_text: str, events: list, sandbox: Path) -> bool:
        if self.kind == "regex":
            return re.search(self.pattern, transcript_text) is not None
        if self.kind == "file_exists":
            return (sandbox / self.path).exists()
        if self.kind == "exit_code":
            exits = [res.exit_status for kind, call, res in events if kind == "tool"]
            return bool(exits) and exits[-1] == self.expect
        raise SkillcError(f"unknown checker kind {self.kind!r}")


@dataclass(frozen=True)
class Microbenchmark:
    id: str
    capability: str
    level: int
    prompt: str
    checker: Checker


@dataclass(frozen=True)
class BenchOutcome:
    bench_id: str
    status: str  # pass | fail | inconclusive
    transcript: str
    cause: str = ""

    @property
    def passed(self) -> bool:
        return self.status == "pass"


@dataclass(frozen=True)
class CapabilityProfile:
    target: TargetDescriptor
    attained: dict[str, int]
    inconsistencies: list[tuple[str, int, int]]  # (capability, passed level, failed lower level)
    profiled_at: float
    catalog_version: str

    def to_json_bytes(self) -> bytes:
        payload = {
            "model_id": self.target.model_id,
            "harness_id": self.target.harness_id,
            "catalog_version": self.catalog_version,
            "attained": dict(sorted(self.attained.items())),
            "inconsistencies": [list(i) for i in self.inconsistencies],
            "profiled_at": self.profiled_at,
        }
        return json.dumps(payload, sort_keys=True, indent=2).encode("utf-8") + b"\n"

    def level(self, capability: str) -> int:
        return self.attained.get(capability, 0)


def default_benchmarks_path() -> Path:
    return Path(str(resources.files("skillc").joinpath("data/benchmarks.yaml")))


def load_benchmarks(path: str | Path) -> list[Microbenchmark]:
    raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    benches = []
    for entry in raw.get("benchmarks", []):
        checker = entry.get("checker", {})
        benches.append(
            Microbenchmark(
                id=str(entry["id"]),
                capability=str(entry["capability"]),
                level=int(entry["level"]),
                prompt=str(entry["prompt"]),
                checker=Checker(
                    kind=str(checker.get("kind", "regex")),
                    pattern=str(checker.get("pattern", "")),
                    path=str(checker.get("path", "")),
                    expect=int(checker.get("expect", 0)),
                ),
            )
        )
    return benches


def render_transcript(events: list) -> str:
    """Render benchmark events into the line format checkers match against."""
    lines = []
    for item in events:
        if item[0] == "model":
            response: InferenceResponse = item[1]
            if response.tool_calls:
                lines.append(f"model (calls={len(response.tool_calls)}): {response.text}")
            else:
                lines.append(f"model: {response.text}")
        else:
            _, call, result = item
            if call.name == "exec":
                compact = str(call.arguments.get("command", ""))
            elif call.name in ("read", "write"):
                compact = str(call.arguments.get("path", ""))
            else:
                compact = json.dumps(call.arguments, sort_keys=True)
            lines.append(f"tool:{call.name}: {compact}")
            lines.append(f"result[{result.exit_status}]: {result.content[:200]}")
    return "\n".join(lines)


def run_microbenchmark(
    bench: Microbenchmark,
    target: TargetDescriptor,
    backend: InferenceBackend,
    sandbox: str | Path,
) -> BenchOutcome:
    """Run one benchmark: prompt the backend, dispatch any tool calls, check.

    Backend or sandbox failures are recorded as inconclusive-with-cause, never
    silently treated as the capability being absent.
    """
    try:
        dispatcher = ToolDispatcher(sandbox)
    except OSError as exc:
        cause = SandboxSetupFailure(f"cannot prepare sandbox {sandbox}: {exc}")
        return BenchOutcome(bench.id, "inconclusive", "", cause=str(cause))

    events: list = []
    messages: list[Message] = [Message(role="user", content=bench.prompt)]
    try:
        for _ in range(BENCH_TURN_LIMIT):
            response = backend.complete(
                InferenceRequest(system="", messages=tuple(messages), tools=dispatcher.descriptors())
            )
            events.append(("model", response))
            if not response.tool_calls:
                break
            messages.append(Message(role="assistant", content=response.text, tool_calls=response.tool_calls))
            for call in response.tool_calls:
                try:
                    result = dispatcher.dispatch(call)
                except SkillcError as exc:
                    result = ToolResult(str(exc), 1)
                events.append(("tool", call, result))
                messages.append(Message(role="tool", content=result.content, tool_call_id=call.name))
    except BackendUnavailable as exc:
        return BenchOutcome(bench.id, "inconclusive", render_transcript(events), cause=str(exc))

    transcript = render_transcript(events)
    passed = bench.checker.evaluate(transcript, events, Path(sandbox))
    return BenchOutcome(bench.id, "pass" if passed else "fail", transcript)


def attained_level(level_results: dict[int, bool]) -> tuple[int, bool]:
    """Fold per-level pass/fail into (attained level, inconsistency flag).

    Attained is the largest L with levels 1..L all passing. A pass above any
    failure flags an inconsistency but never raises the attained level.
    """
    attained = 0
    for level in sorted(level_results):
        if level_results[level] and level == attained + 1:
            attained = level
        else:
            break
    inconsistent = any(
        level_results[high] and not level_results[low]
        for low in level_results
        for high in level_results
        if high > low
    )
    return attained, inconsistent


class ProfileCache:
    """One profile file per (model, harness, catalog version) under a directory."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)

    def path(self, target: TargetDescriptor, catalog_version: str) -> Path:
        return self.directory / f"{target.key}__{_slug(catalog_version)}.json"

    def load(self, target: TargetDescriptor, catalog_version: str) -> CapabilityProfile | None:
        path = self.path(target, catalog_version)
        if not path.is_file():
            return None
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except (json.JSONDecodeError, OSError):
            return None
        return CapabilityProfile(
            target=target,
            attained={k: int(v) for k, v in data.get("attained", {}).items()},
            inconsistencies=[tuple(i) for i in data.get("inconsistencies", [])],
            profiled_at=float(data.get("profiled_at", 0.0)),
            catalog_version=str(data.get("catalog_version", catalog_version)),
        )

    def store(self, profile: CapabilityProfile) -> Path:
        path = self.path(profile.target, profile.catalog_version)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_bytes(profile.to_json_bytes())
        tmp.replace(path)
        return path


def _profile_capability(
    cap_id: str,
    benches: list[Microbenchmark],
    target: TargetDescriptor,
    backend: InferenceBackend,
    sandbox_root: Path,
    transcript_dir: Path | None,
) -> tuple[int, list[tuple[str, int, int]]]:
    by_level: dict[int, list[Microbenchmark]] = {}
    for bench in benches:
        by_level.setdefault(bench.level, []).append(bench)

    level_results: dict[int, bool] = {}
    for level in sorted(by_level):
        passes = 0
        votes = by_level[level]
        for bench in votes:
            sandbox = sandbox_root / bench.id
            outcome = run_microbenchmark(bench, target, backend, sandbox)
            if transcript_dir is not None:
                record = transcript_dir / f"{bench.id}.txt"
                record.parent.mkdir(parents=True, exist_ok=True)
                record.write_text(
                    f"status: {outcome.status}\ncause: {outcome.cause}\n---\n{outcome.transcript}\n",
                    encoding="utf-8",
                )
            if outcome.passed:
                passes += 1
        threshold = PASS_THRESHOLD if len(votes) >= VOTES_PER_LEVEL else len(votes)
        level_results[level] = passes >= threshold

    attained, inconsistent = attained_level(level_results)
    inconsistencies = []
    if inconsistent:
        for low in sorted(level_results):
            for high in sorted(level_results):
                if high > low and level_results[high] and not level_results[low]:
                    inconsistencies.append((cap_id, high, low))
    return attained, inconsistencies


def profile_target(
    target: TargetDescriptor,
    catalog: CapabilityCatalog,
    backend: InferenceBackend,
    cache: ProfileCache,
    benchmarks: list[Microbenchmark] | None = None,
    force: bool = False,
    fan_out: int = 1,
    work_dir: str | Path | None = None,
    clock: Callable[[], float] = time.time,
) -> CapabilityProfile:
    """Profile every catalog capability, or return the cached profile.

    A cache hit returns without any backend invocation. The suite must cover
    every (capability, level) pair or IncompleteBenchmarkSuite is raised.
    """
    if not force:
        cached = cache.load(target, catalog.version)
        if cached is not None:
            return cached

    if benchmarks is None:
        benchmarks = load_benchmarks(default_benchmarks_path())
    suite: dict[str, list[Microbenchmark]] = {}
    for bench in benchmarks:
        suite.setdefault(bench.capability, []).append(bench)

    for cap in catalog.primitives:
        covered = {b.level for b in suite.get(cap.id, [])}
        missing = {spec.level for spec in cap.levels} - covered
        if missing:
            raise IncompleteBenchmarkSuite(
                f"capability {cap.id} has no benchmark for levels {sorted(missing)}"
            )

    base = Path(work_dir) if work_dir is not None else cache.directory / "work" / target.key
    sandbox_root = base / "sandboxes"
    transcript_dir = base / "transcripts"

    attained: dict[str, int] = {}
    inconsistencies: list[tuple[str, int, int]] = []

    def run(cap_id: str) -> tuple[str, int, list[tuple[str, int, int]]]:
        level, incons = _profile_capability(
            cap_id, suite[cap_id], target, backend, sandbox_root, transcript_dir
        )
        return cap_id, level, incons

    cap_ids = [cap.id for cap in catalog.primitives]
    if fan_out > 1 and len(cap_ids) > 1:
        with ThreadPoolExecutor(max_workers=fan_out) as pool:
            results = list(pool.map(run, cap_ids))
    else:
        results = [run(cap_id) for cap_id in cap_ids]

    for cap_id, level, incons in sorted(results):
        attained[cap_id] = level
        inconsistencies.extend(incons)

    profile = CapabilityProfile(
        target=target,
        attained=attained,
        inconsistencies=inconsistencies,
        profiled_at=clock(),
        catalog_version=catalog.version,
    )
    cache.store(profile)
    return profile
