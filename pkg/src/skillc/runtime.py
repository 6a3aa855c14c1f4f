"""Skill runtime: registration, execution, outcome tracking, recompilation.

Execution order per task: run the variant's env-binding script first (its
failure output becomes extra task context, never an abort), then load skill
metadata and, only when a trigger matches the task, the full compiled body
(progressive disclosure). The ReAct loop dispatches tool calls through the
sandboxed dispatcher, honors parallel-stage annotations, spawns sub-agent
sessions under scheduler admission, and consults the solidification monitor
before generation turns: a promoted candidate bypasses the model entirely,
and its failure demotes it and replays the step via the model path.

Every turn and outcome lands in the append-only event log. Enough failures
sharing a capability tag across distinct tasks constitute a systematic gap,
which triggers recompilation from the best-performing variant so far; after
an evaluation window the new variant keeps the active slot only if it beats
the incumbent, otherwise the runtime rolls back.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from . import jit as jitmod
from . import scheduler as sched
from .backends import (
    InferenceBackend,
    InferenceRequest,
    Message,
    ToolDispatcher,
    ToolResult,
)
from .catalog import CapabilityCatalog
from .compiler import Toolchain, compile_skill
from .config import Policy
from .envbind import execute_binding
from .errors import (
    BackendUnavailable,
    CompileFailure,
    ExecutionFailure,
    ParamExtractionFailure,
    SkillcError,
)
from .profiling import TargetDescriptor
from .skills import SkillPackage, parse_skill_package, parse_skill_text
from .store import PASSTHROUGH, LoadedVariant, Store

FAILURE_MARKER = "TASK FAILED"


@dataclass(frozen=True)
class TaskRequest:
    task_id: str
    text: str
    target: TargetDescriptor
    params: dict = field(default_factory=dict)
    trigger_match: bool | None = None  # None: match triggers against the text


@dataclass
class TraceEvent:
    kind: str  # env_binding | model | tool | bypass | subagent | outcome
    payload: dict
    tokens_in: int = 0
    tokens_out: int = 0
    wall_clock: float = 0.0


@dataclass
class ExecutionTrace:
    task_id: str
    skill_id: str
    target_key: str
    variant_id: str
    trigger_matched: bool
    events: list[TraceEvent] = field(default_factory=list)
    outcome: str = "success"  # success | failure | aborted
    failure_kind: str = ""
    retries: int = 0
    final_text: str = ""

    @property
    def tokens_in(self) -> int:
        return sum(e.tokens_in for e in self.events)

    @property
    def tokens_out(self) -> int:
        return sum(e.tokens_out for e in self.events)

    def model_turns(self) -> list[TraceEvent]:
        return [e for e in self.events if e.kind == "model"]

    def dispatch_turns(self) -> int:
        """Model turns that issued at least one tool call."""
        return sum(1 for e in self.model_turns() if e.payload.get("calls", 0) > 0)

    def bypass_turns(self) -> list[TraceEvent]:
        return [e for e in self.events if e.kind == "bypass"]


@dataclass(frozen=True)
class SystematicGap:
    capability_tags: tuple[str, ...]
    failure_count: int
    distinct_tasks: int
    evidence: str


def attribute_failure(transform_log: list[dict], failing_text: str) -> list[str]:
    """Map a failing turn to the capability tags of rewritten spans it touches."""
    tags = []
    for entry in transform_log:
        rewritten = entry.get("rewritten_text", "")
        capability = entry.get("capability", "")
        if not rewritten or not capability:
            continue
        for line in rewritten.splitlines():
            line = line.strip()
            if len(line) > 12 and line in failing_text:
                tags.append(capability)
                break
    return tags or ["untagged"]


class Runtime:
    """Hosts registered skills and drives task execution for one session."""

    def __init__(
        self,
        store: Store,
        catalog: CapabilityCatalog,
        backend: InferenceBackend,
        policy: Policy = Policy(),
        scheduler_policy: sched.SchedulerPolicy = sched.SchedulerPolicy(),
        clock: Callable[[], float] = time.time,
        unit_latency: bool = False,
        session: str = "default",
    ):
        self.store = store
        self.catalog = catalog
        self.backend = backend
        self.policy = policy
        self.scheduler_policy = scheduler_policy
        self.clock = clock
        self.unit_latency = unit_latency
        self.session = session
        self.hints = sched.ConcurrencyHintStore(store.hints_path)

    # ------------------------------------------------------------------
    # Registration
    # ------------------------------------------------------------------
    def register_skill(
        self,
        package_root: str | Path,
        targets: list[TargetDescriptor],
        toolchain: Toolchain,
    ) -> dict[str, str]:
        """Compile (or locate) a variant per target; failures become passthrough."""
        package = parse_skill_package(package_root)
        results: dict[str, str] = {}
        for target in targets:
            if self.store.has_variant(package.id, target):
                existing = self.store.load_variant(package.id, target)
                if existing.manifest.get("source_hash") == package.content_hash():
                    self.store.register(
                        package.id, package.content_hash(), str(package_root), target,
                        existing.variant_id,
                    )
                    results[target.key] = existing.variant_id
                    continue
            try:
                variant = compile_skill(
                    package, target, toolchain, self.policy, clock=self.clock
                )
                self.store.write_variant(variant)
                variant_id = variant.variant_id
            except CompileFailure as exc:
                self.store.append_event(
                    {
                        "type": "compile_failure",
                        "skill": package.id,
                        "target": target.key,
                        "pass": exc.pass_name,
                        "error": str(exc),
                        "ts": self.clock(),
                    }
                )
                variant_id = PASSTHROUGH
            self.store.register(
                package.id, package.content_hash(), str(package_root), target, variant_id
            )
            results[target.key] = variant_id
        return results

    # ------------------------------------------------------------------
    # Execution
    # ------------------------------------------------------------------
    def _load_for_execution(
        self, skill_id: str, target: TargetDescriptor
    ) -> tuple[LoadedVariant | None, SkillPackage]:
        entry = self.store.registered(skill_id)
        package = parse_skill_package(entry["package_root"])
        variant_id = entry.get("variants", {}).get(target.key, PASSTHROUGH)
        if variant_id != PASSTHROUGH and self.store.has_variant(skill_id, target):
            return self.store.load_variant(skill_id, target), package
        return None, package

    def _system_prompt(
        self,
        package: SkillPackage,
        body: str | None,
        variant: LoadedVariant | None,
        target: TargetDescriptor,
    ) -> str:
        parts = [
            f'You are executing the skill "{package.metadata.name}": '
            f"{package.metadata.description}",
        ]
        if body is not None:
            parts.append("Full instructions:\n" + body)
            if variant is not None and target.features.batch_dispatch:
                for annotation in variant.annotations:
                    if annotation.kind != "ilp_stage":
                        continue
                    steps = ", ".join(annotation.step_ids)
                    bindings = "; ".join(
                        f"{b['from']} -> {b['artifact']} -> {b['to']}"
                        for b in annotation.payload.get("bindings", [])
                    )
                    parts.append(
                        f"Execution plan: steps {steps} are independent; issue all "
                        f"their tool calls together in one single turn."
                        + (f" Output bindings: {bindings}." if bindings else "")
                    )
        parts.append("Tools available: read, write, exec.")
        return "\n\n".join(parts)

    def _record_model_event(self, trace: ExecutionTrace, response) -> None:
        trace.events.append(
            TraceEvent(
                kind="model",
                payload={"calls": len(response.tool_calls), "text": response.text[:400]},
                tokens_in=response.usage.tokens_in,
                tokens_out=response.usage.tokens_out,
                wall_clock=1.0 if self.unit_latency else 0.0,
            )
        )

    def _try_bypass(
        self,
        trace: ExecutionTrace,
        request: TaskRequest,
        candidates: list[jitmod.JitCandidate],
        states: dict[str, jitmod.CandidateState],
        dispatcher: ToolDispatcher,
        eligible: set[str],
    ) -> tuple[str, str] | None:
        """Execute a promoted matching candidate; returns (cand_id, stdout).

        Eligibility is fixed at task start (a candidate promoted mid-task
        starts bypassing from the next invocation) and each candidate gets
        one attempt per task: its parameters cannot change mid-task.
        """
        for candidate in candidates:
            state = states.get(candidate.id, jitmod.CandidateState())
            if candidate.id not in eligible or state.status != jitmod.PROMOTED:
                continue
            if not candidate.matches_context(request.text):
                continue
            eligible.discard(candidate.id)
            try:
                params = jitmod.extract_params(candidate, request.params, state.last_bound)
            except ParamExtractionFailure as exc:
                trace.events.append(
                    TraceEvent("bypass", {"candidate": candidate.id, "skipped": str(exc)})
                )
                continue  # one-off model fallback, state unchanged
            script = jitmod.instantiation_script(candidate, params)
            script_path = f".jit/{candidate.id}.sh"
            dispatcher.dispatch(
                _call("write", {"path": script_path, "content": script})
            )
            result = dispatcher.dispatch(_call("exec", {"command": f"sh {script_path}"}))
            if result.ok:
                states[candidate.id] = jitmod.CandidateState(
                    status=jitmod.PROMOTED,
                    consecutive=state.consecutive,
                    bypasses=state.bypasses + 1,
                    failures=state.failures,
                    last_bound=params,
                )
                trace.events.append(
                    TraceEvent(
                        "bypass",
                        {"candidate": candidate.id, "params": params, "output": result.content[:400]},
                    )
                )
                return candidate.id, result.content
            states[candidate.id] = jitmod.demote(state)
            trace.events.append(
                TraceEvent(
                    "bypass",
                    {
                        "candidate": candidate.id,
                        "demoted": True,
                        "error": str(ExecutionFailure(f"exit {result.exit_status}")),
                    },
                )
            )
        return None

    def _observe_generation(
        self,
        request: TaskRequest,
        response,
        candidates: list[jitmod.JitCandidate],
        states: dict[str, jitmod.CandidateState],
    ) -> None:
        code = _generated_code(response)
        if not code:
            return
        for candidate in candidates:
            if not candidate.matches_context(request.text):
                continue
            state = states.get(candidate.id, jitmod.CandidateState())
            if state.status != jitmod.OBSERVING:
                continue
            result = jitmod.match_signature(candidate, code)
            new_state = jitmod.observe(state, result.matched, self.policy.promotion_k)
            if result.matched:
                new_state = jitmod.CandidateState(
                    status=new_state.status,
                    consecutive=new_state.consecutive,
                    bypasses=new_state.bypasses,
                    failures=new_state.failures,
                    last_bound=dict(result.params),
                )
            states[candidate.id] = new_state

    def _run_subagents(
        self,
        trace: ExecutionTrace,
        variant: LoadedVariant,
        request: TaskRequest,
        skill_id: str,
    ) -> str:
        blocks = [a for a in variant.annotations if a.kind == "subagent"]
        if not blocks:
            return ""
        fingerprint = sched.system_fingerprint()
        hint = self.hints.load_hint(skill_id, fingerprint, self.scheduler_policy.default_concurrency)
        pending = [
            sched.SubAgentHandle(id=str(a.step_ids[0]), duration=1) for a in blocks
        ]
        by_id = {str(a.step_ids[0]): a for a in blocks}
        results: list[str] = []
        running_peak = 0
        launch_counter = 0
        while pending:
            admitted = sched.admit(
                pending, 0, sched.ResourceSignals(), self.scheduler_policy, hint
            )
            if not admitted:
                admitted = pending[:1]  # never stall on an over-tight hint
            running_peak = max(running_peak, len(admitted))
            for handle in admitted:
                handle.launch_index = launch_counter
                launch_counter += 1
                annotation = by_id[handle.id]
                text, turns, tokens = self._subagent_session(annotation, request)
                trace.events.append(
                    TraceEvent(
                        "subagent",
                        {"step": handle.id, "turns": turns, "result": text[:400]},
                        tokens_in=tokens[0],
                        tokens_out=tokens[1],
                        wall_clock=float(turns) if self.unit_latency else 0.0,
                    )
                )
                results.append(f"- {handle.id} -> {annotation.payload.get('output', '')}: {text}")
            pending = pending[len(admitted):]
        self.hints.record_hint(skill_id, fingerprint, running_peak)
        return "Sub-agent results:\n" + "\n".join(results)

    def _subagent_session(self, annotation, request: TaskRequest) -> tuple[str, int, tuple[int, int]]:
        task = str(annotation.payload.get("task", ""))
        inputs = ", ".join(annotation.payload.get("inputs", []))
        prompt = f"Sub-agent task: {task}"
        if inputs:
            prompt += f"\nDeclared input context: {inputs}"
        messages = [Message(role="user", content=prompt)]
        tokens_in = tokens_out = 0
        text = ""
        turns = 0
        for _ in range(max(2, self.policy.turn_limit // 4)):
            response = self.backend.complete(
                InferenceRequest(system="", messages=tuple(messages))
            )
            turns += 1
            tokens_in += response.usage.tokens_in
            tokens_out += response.usage.tokens_out
            text = response.text
            if not response.tool_calls:
                break
            messages.append(
                Message(role="assistant", content=response.text, tool_calls=response.tool_calls)
            )
            messages.append(Message(role="tool", content="ok"))
        return text, turns, (tokens_in, tokens_out)

    def execute_task(
        self,
        skill_id: str,
        request: TaskRequest,
        sandbox: str | Path | None = None,
        bind_env: dict[str, str] | None = None,
        evaluator: Callable[[str, ExecutionTrace, Path], bool] | None = None,
        use_jit: bool = True,
        assume_yes: bool = False,
    ) -> ExecutionTrace:
        variant, package = self._load_for_execution(skill_id, request.target)
        variant_id = variant.variant_id if variant else PASSTHROUGH

        triggers = package.metadata.triggers or (package.metadata.name,)
        if request.trigger_match is not None:
            trigger_matched = request.trigger_match
        else:
            trigger_matched = any(t.lower() in request.text.lower() for t in triggers)
        trace = ExecutionTrace(
            task_id=request.task_id,
            skill_id=skill_id,
            target_key=request.target.key,
            variant_id=variant_id,
            trigger_matched=trigger_matched,
        )

        sandbox_dir = Path(sandbox) if sandbox else self.store.root / "sandbox" / request.task_id
        dispatcher = ToolDispatcher(
            sandbox_dir,
            exec_timeout=self.policy.exec_timeout,
            extra_env={"SKILL_DIR": str(Path(self.store.registered(skill_id)["package_root"]).resolve())},
        )

        # env binding always runs first; its failure feeds context, never aborts
        context_extra = ""
        if variant is not None and variant.script_text.strip():
            outcome = execute_binding(
                variant.script_text,
                env=bind_env,
                cwd=sandbox_dir,
                timeout=self.policy.script_timeout,
                assume_yes=assume_yes,
                lock_path=variant.directory / "bind",
            )
            trace.events.append(
                TraceEvent("env_binding", {"status": outcome.status, "stdout": outcome.stdout[-2000:]})
            )
            if not outcome.ok:
                context_extra = (
                    "Environment binding reported unsatisfied dependencies:\n" + outcome.stdout
                )
        else:
            trace.events.append(TraceEvent("env_binding", {"status": "skipped"}))

        body = None
        if trigger_matched:
            if variant is not None:
                compiled = parse_skill_text(variant.compiled_text, skill_id)
                body = compiled.body
            else:
                body = package.body
        system = self._system_prompt(package, body, variant, request.target)

        candidates = list(variant.candidates) if (variant and use_jit) else []
        states = (
            self.store.load_jit_states(variant.directory, self.session)
            if variant is not None
            else {}
        )
        promoted_at_start = {
            cid for cid, s in states.items() if s.status == jitmod.PROMOTED
        }

        user_parts = [request.text]
        if request.params:
            user_parts.append(
                "Parameters: " + ", ".join(f"{k}={v}" for k, v in sorted(request.params.items()))
            )
        if context_extra:
            user_parts.append(context_extra)
        if variant is not None and request.target.features.subagent_spawn:
            subagent_context = self._run_subagents(trace, variant, request, skill_id)
            if subagent_context:
                user_parts.append(subagent_context)

        messages: list[Message] = [Message(role="user", content="\n\n".join(user_parts))]

        bypassed: str | None = None
        try:
            for _ in range(self.policy.turn_limit):
                if candidates:
                    done = self._try_bypass(
                        trace, request, candidates, states, dispatcher, promoted_at_start
                    )
                    if done is not None:
                        bypassed, trace.final_text = done
                        break
                response = self.backend.complete(
                    InferenceRequest(
                        system=system,
                        messages=tuple(messages),
                        tools=dispatcher.descriptors(),
                        max_tokens=request.target.features.context_budget,
                    )
                )
                self._record_model_event(trace, response)
                if candidates:
                    self._observe_generation(request, response, candidates, states)

                if not response.tool_calls:
                    trace.final_text = response.text
                    break

                messages.append(
                    Message(role="assistant", content=response.text, tool_calls=response.tool_calls)
                )
                for call in response.tool_calls:
                    try:
                        result = dispatcher.dispatch(call)
                    except SkillcError as exc:
                        result = ToolResult(str(exc), 1)
                    if not result.ok:
                        trace.retries += 1
                    trace.events.append(
                        TraceEvent(
                            "tool",
                            {
                                "name": call.name,
                                "args": call.arguments,
                                "exit": result.exit_status,
                                "output": result.content[:400],
                            },
                        )
                    )
                    messages.append(
                        Message(role="tool", content=result.content, tool_call_id=call.name)
                    )
            else:
                trace.outcome = "aborted"
                trace.failure_kind = "turn_limit_exceeded"
        except BackendUnavailable as exc:
            trace.outcome = "aborted"
            trace.failure_kind = f"backend_unavailable: {exc}"

        if trace.outcome != "aborted":
            if evaluator is not None:
                ok = evaluator(trace.final_text, trace, sandbox_dir)
            else:
                ok = bool(trace.final_text) and FAILURE_MARKER not in trace.final_text
            trace.outcome = "success" if ok else "failure"
            if not ok:
                trace.failure_kind = trace.failure_kind or "task_failed"

        # a failed task demotes any candidate whose bypass it relied on
        if bypassed is not None and trace.outcome != "success":
            states[bypassed] = jitmod.demote(states.get(bypassed, jitmod.CandidateState()))

        if variant is not None and use_jit:
            self.store.save_jit_states(variant.directory, states, self.session)

        self._record_outcome(trace, variant)
        return trace

    # ------------------------------------------------------------------
    # Outcome recording and adaptive recompilation
    # ------------------------------------------------------------------
    def _record_outcome(self, trace: ExecutionTrace, variant: LoadedVariant | None) -> None:
        for index, event in enumerate(trace.events):
            record = {
                "type": "turn",
                "task": trace.task_id,
                "skill": trace.skill_id,
                "index": index,
                "kind": event.kind,
                "tokens_in": event.tokens_in,
                "tokens_out": event.tokens_out,
                "wall_clock": event.wall_clock,
            }
            if event.kind == "model":
                record["calls"] = event.payload.get("calls", 0)
            elif event.kind == "tool":
                record["tool"] = event.payload.get("name", "")
                record["exit"] = event.payload.get("exit", 0)
            elif event.kind == "bypass":
                record["candidate"] = event.payload.get("candidate", "")
            self.store.append_event(record)
        self.store.append_event(
            {
                "type": "task",
                "task": trace.task_id,
                "skill": trace.skill_id,
                "target": trace.target_key,
                "variant": trace.variant_id,
                "outcome": trace.outcome,
                "failure_kind": trace.failure_kind,
                "turns": len(trace.model_turns()),
                "dispatch_turns": trace.dispatch_turns(),
                "bypasses": len(trace.bypass_turns()),
                "tokens_in": trace.tokens_in,
                "tokens_out": trace.tokens_out,
                "retries": trace.retries,
                "trigger_matched": trace.trigger_matched,
                "wall_clock": sum(e.wall_clock for e in trace.events),
                "ts": self.clock(),
            }
        )
        if trace.outcome != "success" or trace.retries > 0:
            tail = []
            for event in trace.events[-6:]:
                parts = [
                    str(event.payload.get(k, ""))
                    for k in ("text", "output", "args")
                    if event.payload.get(k)
                ]
                if parts:
                    tail.append(" ".join(parts))
            failing_text = "\n".join(tail + [trace.final_text])
            tags = attribute_failure(variant.transform_log if variant else [], failing_text)
            excerpt_events = [
                f"{e.kind}: {e.payload}" for e in trace.events[-4:]
            ]
            self.store.append_event(
                {
                    "type": "failure_log",
                    "task": trace.task_id,
                    "skill": trace.skill_id,
                    "target": trace.target_key,
                    "capability_tags": tags,
                    "excerpt": " | ".join(excerpt_events)[: self.policy.max_evidence_tokens * 4],
                    "self_recovery": trace.retries > 0 and trace.outcome == "success",
                    "ts": self.clock(),
                }
            )
        self._update_history(trace)

    def _update_history(self, trace: ExecutionTrace) -> None:
        target = _target_from_key(trace.target_key)
        history = self.store.load_history(trace.skill_id, target)
        entries = history["entries"]
        entry = next((e for e in entries if e["variant_id"] == trace.variant_id), None)
        if entry is None:
            entry = {"variant_id": trace.variant_id, "score_sum": 0.0, "n": 0}
            entries.append(entry)
        entry["score_sum"] += 1.0 if trace.outcome == "success" else 0.0
        entry["n"] += 1
        if not history["active"]:
            history["active"] = trace.variant_id
        if not history["best"]:
            history["best"] = trace.variant_id

        # judge a provisional variant at its evaluation-window boundary
        if (
            history.get("provisional") == trace.variant_id
            and entry["n"] >= self.policy.eval_window
        ):
            best_entry = next(
                (e for e in entries if e["variant_id"] == history["best"]), None
            )
            new_score = entry["score_sum"] / entry["n"]
            best_score = (
                best_entry["score_sum"] / best_entry["n"]
                if best_entry and best_entry["n"]
                else 0.0
            )
            if new_score >= best_score:
                history["best"] = trace.variant_id
                history["active"] = trace.variant_id
            else:
                history["active"] = history["best"]  # roll back
                self._activate(trace.skill_id, target, history["best"])
            history.pop("provisional", None)
        self.store.save_history(trace.skill_id, target, history)

    def _activate(self, skill_id: str, target: TargetDescriptor, variant_id: str) -> None:
        if variant_id == PASSTHROUGH:
            return
        try:
            self.store.activate_variant(skill_id, target, variant_id)
            entry = self.store.registered(skill_id)
            self.store.register(
                skill_id, entry["source_hash"], entry["package_root"], target, variant_id
            )
        except SkillcError:
            pass  # archived copy missing: keep whatever is active

    def detect_systematic_gap(
        self, skill_id: str, target: TargetDescriptor
    ) -> SystematicGap | None:
        """Gap iff >= min_failures failures share a tag across >= min_distinct_tasks."""
        by_tag: dict[str, list[dict]] = {}
        for record in self.store.read_events():
            if record.get("type") != "failure_log" or record.get("skill") != skill_id:
                continue
            if record.get("target") != target.key:
                continue
            for tag in record.get("capability_tags", []):
                if tag != "untagged":
                    by_tag.setdefault(tag, []).append(record)
        gap_tags = []
        count = 0
        tasks: set[str] = set()
        for tag, records in sorted(by_tag.items()):
            distinct = {r["task"] for r in records}
            if len(records) >= self.policy.min_failures and len(distinct) >= self.policy.min_distinct_tasks:
                gap_tags.append(tag)
                count += len(records)
                tasks |= distinct
        if not gap_tags:
            return None
        evidence = " | ".join(
            r.get("excerpt", "")
            for r in self.store.read_events()
            if r.get("type") == "failure_log" and r.get("skill") == skill_id
        )[: self.policy.max_evidence_tokens * 4]
        return SystematicGap(
            capability_tags=tuple(gap_tags),
            failure_count=count,
            distinct_tasks=len(tasks),
            evidence=evidence,
        )

    def recompile_and_rollback(
        self,
        skill_id: str,
        target: TargetDescriptor,
        gap: SystematicGap,
        toolchain: Toolchain,
    ) -> str:
        """Recompile from the best variant with failure evidence; provisional active."""
        entry = self.store.registered(skill_id)
        package = parse_skill_package(entry["package_root"])
        history = self.store.load_history(skill_id, target)

        source = package
        best_id = history.get("best", "")
        if best_id and best_id != PASSTHROUGH:
            try:
                best_variant = self.store.load_variant_version(skill_id, target, best_id)
            except SkillcError:
                best_variant = None
            if best_variant is not None:
                parsed = parse_skill_text(best_variant.compiled_text, skill_id)
                source = SkillPackage(
                    id=parsed.id,
                    metadata=parsed.metadata,
                    body=parsed.body,
                    blocks=parsed.blocks,
                    resources=package.resources,
                    frontmatter_text=parsed.frontmatter_text,
                )

        # systematic failures mean the skill demands more of these capabilities
        # than static extraction estimated: bias their levels up one so the
        # compiler applies targeted compensation carrying the failure evidence
        adjusted_toolchain = Toolchain(
            catalog=toolchain.catalog,
            analysis=_GapBiasedAnalysis(
                toolchain.analysis, toolchain.catalog, set(gap.capability_tags)
            ),
            transform=toolchain.transform,
            prober=toolchain.prober,
            profile=toolchain.resolve_profile(target),
        )
        try:
            variant = compile_skill(
                source, target, adjusted_toolchain, self.policy, evidence=gap.evidence,
                clock=self.clock,
            )
        except CompileFailure as exc:
            self.store.append_event(
                {
                    "type": "recompile_failure",
                    "skill": skill_id,
                    "target": target.key,
                    "error": str(exc),
                    "ts": self.clock(),
                }
            )
            return history.get("active", PASSTHROUGH)

        self.store.write_variant(variant)
        self.store.register(
            skill_id, package.content_hash(), entry["package_root"], target, variant.variant_id
        )
        history = self.store.load_history(skill_id, target)
        history["active"] = variant.variant_id
        history["provisional"] = variant.variant_id
        self.store.save_history(skill_id, target, history)
        self.store.append_event(
            {
                "type": "recompiled",
                "skill": skill_id,
                "target": target.key,
                "variant": variant.variant_id,
                "tags": list(gap.capability_tags),
                "ts": self.clock(),
            }
        )
        return variant.variant_id


class _GapBiasedAnalysis:
    """Requirement extraction biased one level up for gap capabilities."""

    def __init__(self, base, catalog: CapabilityCatalog, bump: set[str]):
        self._base = base
        self._catalog = catalog
        self._bump = bump

    def extract_requirements(self, skill):
        from dataclasses import replace

        from .compiler import RequirementSet

        reqs = self._base.extract_requirements(skill)
        adjusted = tuple(
            replace(r, level=min(r.level + 1, self._catalog.get(r.capability).max_level))
            if r.capability in self._bump
            else r
            for r in reqs.requirements
        )
        return RequirementSet(adjusted, reqs.equivalence_classes)

    def __getattr__(self, name):
        return getattr(self._base, name)


def _call(name: str, arguments: dict):
    from .backends import ToolCall

    return ToolCall(name=name, arguments=arguments)


def _generated_code(response) -> str:
    commands = [
        str(c.arguments.get("command", ""))
        for c in response.tool_calls
        if c.name == "exec"
    ]
    if commands:
        return "\n".join(commands)
    import re

    fence = re.search(r"```\w*\n(.*?)```", response.text, re.DOTALL)
    if fence:
        return fence.group(1)
    return ""


def _target_from_key(key: str) -> TargetDescriptor:
    model, _, harness = key.partition("__")
    return TargetDescriptor(model_id=model, harness_id=harness)
