"""Resource-aware admission and suspension for parallel sub-agents.

The scheduler is the single authority over sub-agent handle state. Each tick
it reads the current resource signals: any signal above its threshold blocks
all new launches and suspends enough running agents to halve the active set;
when signals drop below the threshold minus a hysteresis margin, suspended
agents resume in reverse suspension order. The effective concurrency a run
settles at (max running after the last throttle event) is persisted per
(skill, system fingerprint) and seeds the next run's admission cap.
"""

from __future__ import annotations

import json
import logging
import math
import platform
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path

logger = logging.getLogger(__name__)

PENDING = "pending"
RUNNING = "running"
SUSPENDED = "suspended"
DONE = "done"


@dataclass(frozen=True)
class ResourceSignals:
    cpu_utilization: float = 0.0
    memory_utilization: float = 0.0
    api_latency_ewma: float = 0.0  # milliseconds
    rate_limit_hits: int = 0  # HTTP-429-class events in the window
    window: float = 60.0

    def __post_init__(self):
        if not (0.0 <= self.cpu_utilization <= 1.0 and 0.0 <= self.memory_utilization <= 1.0):
            raise ValueError("utilization fractions must lie in [0, 1]")
        if self.rate_limit_hits < 0 or self.window <= 0:
            raise ValueError("rate_limit_hits must be >= 0 and window positive")


@dataclass(frozen=True)
class SchedulerPolicy:
    cpu_threshold: float = 0.85
    memory_threshold: float = 0.85
    latency_threshold_ms: float = 5000.0
    rate_limit_threshold: int = 1
    max_concurrency: int = 8
    default_concurrency: int = 4
    suspend_strategy: str = "by_launch_order"  # by_launch_order | by_usage
    hysteresis: float = 0.10  # fraction of each threshold

    def __post_init__(self):
        if min(self.cpu_threshold, self.memory_threshold, self.latency_threshold_ms,
               self.rate_limit_threshold) <= 0:
            raise ValueError("thresholds must be positive")
        if self.max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")


@dataclass
class SubAgentHandle:
    id: str
    state: str = PENDING
    usage: float = 0.0  # tokens in flight (usage proxy for victim selection)
    launch_index: int = -1
    suspend_index: int = -1
    progress: int = 0
    duration: int = 1


def breached_signals(signals: ResourceSignals, policy: SchedulerPolicy) -> list[str]:
    names = []
    if signals.cpu_utilization > policy.cpu_threshold:
        names.append("cpu")
    if signals.memory_utilization > policy.memory_threshold:
        names.append("memory")
    if signals.api_latency_ewma > policy.latency_threshold_ms:
        names.append("latency")
    if signals.rate_limit_hits >= policy.rate_limit_threshold:
        names.append("rate_limit")
    return names


def below_resume_margin(signals: ResourceSignals, policy: SchedulerPolicy) -> bool:
    h = 1.0 - policy.hysteresis
    return (
        signals.cpu_utilization <= policy.cpu_threshold * h
        and signals.memory_utilization <= policy.memory_threshold * h
        and signals.api_latency_ewma <= policy.latency_threshold_ms * h
        and signals.rate_limit_hits == 0
    )


def admit(
    pending: list[SubAgentHandle],
    running_count: int,
    signals: ResourceSignals,
    policy: SchedulerPolicy,
    hint: int | None = None,
) -> list[SubAgentHandle]:
    """FIFO launches up to min(hint, max_concurrency); zero under pressure."""
    if breached_signals(signals, policy):
        return []
    cap = min(hint or policy.default_concurrency, policy.max_concurrency)
    slots = max(0, cap - running_count)
    return pending[:slots]


def relieve_pressure(
    running: list[SubAgentHandle],
    signals: ResourceSignals,
    policy: SchedulerPolicy,
) -> list[SubAgentHandle]:
    """Suspend the minimum set bringing concurrency to ceil(running/2).

    Victims are picked per policy: by_usage takes the heaviest consumers
    first, by_launch_order the most recently launched. The last running
    agent is never suspended.
    """
    if len(running) <= 1 or not breached_signals(signals, policy):
        return []
    target = math.ceil(len(running) / 2)
    count = len(running) - target
    if policy.suspend_strategy == "by_usage":
        victims = sorted(running, key=lambda h: (-h.usage, -h.launch_index))
    else:
        victims = sorted(running, key=lambda h: -h.launch_index)
    return victims[:count]


def resume_order(suspended: list[SubAgentHandle]) -> list[SubAgentHandle]:
    """Suspended agents resume in reverse suspension order."""
    return sorted(suspended, key=lambda h: -h.suspend_index)


# ---------------------------------------------------------------------------
# Concurrency hints
# ---------------------------------------------------------------------------

def system_fingerprint() -> str:
    try:
        import psutil

        memory = psutil.virtual_memory().total
        cores = psutil.cpu_count() or 1
    except Exception:
        memory, cores = 0, 1
    return f"{platform.node()}|{cores}|{memory}"


class ConcurrencyHintStore:
    """Per-(skill, fingerprint) effective concurrency from the previous run."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def _read(self) -> dict:
        if not self.path.is_file():
            return {}
        try:
            data = json.loads(self.path.read_text(encoding="utf-8"))
            return data if isinstance(data, dict) else {}
        except (json.JSONDecodeError, OSError):
            logger.warning("corrupt hint store at %s; using defaults", self.path)
            return {}

    def record_hint(self, skill_id: str, fingerprint: str, effective: int) -> None:
        if effective < 1:
            return
        data = self._read()
        data[f"{skill_id}|{fingerprint}"] = int(effective)
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            tmp = self.path.with_suffix(".tmp")
            tmp.write_text(json.dumps(data, sort_keys=True, indent=2) + "\n", encoding="utf-8")
            tmp.replace(self.path)
        except OSError as exc:
            logger.warning("hint store write failed (%s); hints degrade to defaults", exc)

    def load_hint(self, skill_id: str, fingerprint: str, default: int) -> int:
        value = self._read().get(f"{skill_id}|{fingerprint}")
        if isinstance(value, int) and value >= 1:
            return value
        return default


# ---------------------------------------------------------------------------
# Signal sources
# ---------------------------------------------------------------------------

class SignalCollector:
    """Aggregates backend latency/429 feedback into ResourceSignals.

    Implements the backend SignalSink protocol; rate-limit hits are counted
    over a sliding window and latency is folded into an EWMA.
    """

    def __init__(self, window: float = 60.0, alpha: float = 0.3, clock=time.monotonic):
        self.window = window
        self.alpha = alpha
        self._clock = clock
        self._latency_ewma = 0.0
        self._hits: deque[float] = deque()

    def record_latency(self, milliseconds: float) -> None:
        if self._latency_ewma == 0.0:
            self._latency_ewma = milliseconds
        else:
            self._latency_ewma = self.alpha * milliseconds + (1 - self.alpha) * self._latency_ewma

    def record_rate_limit(self) -> None:
        self._hits.append(self._clock())

    def signals(self, cpu: float = 0.0, memory: float = 0.0) -> ResourceSignals:
        now = self._clock()
        while self._hits and now - self._hits[0] > self.window:
            self._hits.popleft()
        return ResourceSignals(
            cpu_utilization=cpu,
            memory_utilization=memory,
            api_latency_ewma=self._latency_ewma,
            rate_limit_hits=len(self._hits),
            window=self.window,
        )


class HostSignalSampler:
    """psutil-backed CPU/memory sampler for production use."""

    def __init__(self, collector: SignalCollector | None = None):
        self.collector = collector or SignalCollector()

    def sample(self) -> ResourceSignals:
        import psutil

        cpu = psutil.cpu_percent(interval=None) / 100.0
        memory = psutil.virtual_memory().percent / 100.0
        return self.collector.signals(cpu=cpu, memory=memory)


# ---------------------------------------------------------------------------
# Deterministic simulation harness
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TickRecord:
    tick: int
    breached: tuple[str, ...]
    launched: tuple[str, ...]
    suspended: tuple[str, ...]
    resumed: tuple[str, ...]
    running: tuple[str, ...]
    throttled: bool  # pressure blocked work this tick


@dataclass(frozen=True)
class SimulationResult:
    timeline: tuple[TickRecord, ...]
    completed: tuple[str, ...]
    effective_concurrency: int


def effective_concurrency(timeline: list[TickRecord]) -> int:
    """Max running count after the run's last throttle event (whole run if none)."""
    last_throttle = -1
    for record in timeline:
        if record.throttled:
            last_throttle = record.tick
    counts = [len(r.running) for r in timeline if r.tick > last_throttle]
    peak = max(counts, default=0)
    return max(peak, 1) if counts else 1


def simulate(
    signal_trace: list[ResourceSignals],
    durations: list[int],
    policy: SchedulerPolicy = SchedulerPolicy(),
    hint: int | None = None,
    max_ticks: int = 10_000,
) -> SimulationResult:
    """Replay a signal trace against a set of agent tasks, tick by tick.

    Suspension and resumption never happen in the same tick (oscillation
    guard); once the trace is exhausted its last signals persist until every
    agent completes or max_ticks is hit.
    """
    handles = [
        SubAgentHandle(id=f"a{i + 1}", duration=max(1, d)) for i, d in enumerate(durations)
    ]
    timeline: list[TickRecord] = []
    launch_counter = 0
    suspend_counter = 0
    tick = 0

    while any(h.state != DONE for h in handles) and tick < max_ticks:
        signals = signal_trace[tick] if tick < len(signal_trace) else (
            signal_trace[-1] if signal_trace else ResourceSignals()
        )
        breached = breached_signals(signals, policy)
        pending = [h for h in handles if h.state == PENDING]
        running = [h for h in handles if h.state == RUNNING]
        suspended = [h for h in handles if h.state == SUSPENDED]

        launched_ids: list[str] = []
        suspended_ids: list[str] = []
        resumed_ids: list[str] = []

        if breached:
            for victim in relieve_pressure(running, signals, policy):
                victim.state = SUSPENDED
                victim.suspend_index = suspend_counter
                suspend_counter += 1
                suspended_ids.append(victim.id)
        else:
            if suspended and below_resume_margin(signals, policy):
                for handle in resume_order(suspended):
                    handle.state = RUNNING
                    resumed_ids.append(handle.id)
            running = [h for h in handles if h.state == RUNNING]
            for handle in admit(pending, len(running), signals, policy, hint):
                handle.state = RUNNING
                handle.launch_index = launch_counter
                launch_counter += 1
                launched_ids.append(handle.id)

        active = [h for h in handles if h.state == RUNNING]
        for handle in active:
            handle.progress += 1
            if handle.progress >= handle.duration:
                handle.state = DONE

        throttled = bool(breached) and bool(pending or running)
        timeline.append(
            TickRecord(
                tick=tick,
                breached=tuple(breached),
                launched=tuple(launched_ids),
                suspended=tuple(suspended_ids),
                resumed=tuple(resumed_ids),
                running=tuple(h.id for h in active),
                throttled=throttled,
            )
        )
        tick += 1

    return SimulationResult(
        timeline=tuple(timeline),
        completed=tuple(h.id for h in handles if h.state == DONE),
        effective_concurrency=effective_concurrency(timeline),
    )


def load_signal_trace(path: str | Path) -> list[ResourceSignals]:
    """Read a signal trace file (YAML list of per-tick signal records)."""
    import yaml

    raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or []
    return [
        ResourceSignals(
            cpu_utilization=float(r.get("cpu", 0.0)),
            memory_utilization=float(r.get("memory", 0.0)),
            api_latency_ewma=float(r.get("latency_ms", 0.0)),
            rate_limit_hits=int(r.get("rate_limit_hits", 0)),
        )
        for r in raw
    ]
