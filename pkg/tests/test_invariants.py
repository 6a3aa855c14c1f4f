"""Cross-module invariants: sandbox containment, internal consistency checks,
profiling fan-out determinism, and bypass parameter fallback."""

from __future__ import annotations

import json

import pytest

from skillc.concurrency import ExecutionAnnotation, WorkflowDag, WorkflowStep, emit_annotations
from skillc.concurrency import ParallelOpportunity
from skillc.errors import BindingGap
from skillc.jit import CandidateState, PROMOTED
from skillc.profiling import ProfileCache, profile_target
from skillc.runtime import TaskRequest

from conftest import FIXTURES, FROZEN_CLOCK, exec_turn, make_profile, make_target, make_toolchain, scripted, text_turn
from test_profiling import shell_passing_backend, suite_for_shell
from test_runtime import make_runtime, task


def test_binding_gap_on_inconsistent_dag():
    # a tampered DAG: an edge exists but the endpoints share no artifact
    steps = (
        WorkflowStep(id="a", description="a", produces=frozenset({"x"})),
        WorkflowStep(id="b", description="b", produces=frozenset({"y"})),
        WorkflowStep(id="c", description="c", consumes=frozenset({"z"})),
    )
    dag = WorkflowDag(steps=steps, edges=(("a", "c"),), stages=(("a", "b"), ("c",)))
    op = ParallelOpportunity(
        kind="ilp", step_ids=("a", "b"), required_feature="batch_dispatch", resolution="applied"
    )
    with pytest.raises(BindingGap):
        emit_annotations([op], dag, "body")


def test_profiling_fan_out_matches_serial(tmp_path, catalog):
    serial = profile_target(
        make_target(), catalog, shell_passing_backend(), ProfileCache(tmp_path / "serial"),
        benchmarks=suite_for_shell(), clock=FROZEN_CLOCK,
    )
    fanned = profile_target(
        make_target(), catalog, shell_passing_backend(), ProfileCache(tmp_path / "fanned"),
        benchmarks=suite_for_shell(), fan_out=4, clock=FROZEN_CLOCK,
    )
    assert fanned.to_json_bytes() == serial.to_json_bytes()


def test_benchmark_transcripts_persisted(tmp_path, catalog):
    cache = ProfileCache(tmp_path / "cache")
    profile_target(make_target(), catalog, shell_passing_backend(), cache,
                   benchmarks=suite_for_shell(), clock=FROZEN_CLOCK)
    transcripts = list((tmp_path / "cache" / "work").rglob("*.txt"))
    assert len(transcripts) == 26 * 3 * 3
    sample = next(t for t in transcripts if t.name == "gen.code.shell.L1.a.txt")
    assert "status: pass" in sample.read_text(encoding="utf-8")


def test_bypass_skipped_when_params_missing(tmp_path, catalog):
    backend = scripted(
        {"weather": [exec_turn('sh "$SKILL_DIR/scripts/report.sh" city=Oslo format=3'),
                     text_turn("done")]},
        repeat={"weather"},
    )
    runtime = make_runtime(tmp_path, catalog, backend)
    target = make_target()
    profile = make_profile(catalog, target)
    runtime.register_skill(FIXTURES / "weather_skill", [target], make_toolchain(catalog, profile))

    # force a promoted state with no remembered bindings
    variant = runtime.store.load_variant("weather_skill", target)
    candidate_id = variant.candidates[0].id
    runtime.store.save_jit_states(
        variant.directory,
        {candidate_id: CandidateState(status=PROMOTED, consecutive=3)},
        session=runtime.session,
    )

    trace = runtime.execute_task("weather_skill", task("weather please", target=target))
    # one-off model fallback: no executed bypass, state still promoted
    skipped = [e for e in trace.events if e.kind == "bypass" and "skipped" in e.payload]
    assert skipped and "city" in skipped[0].payload["skipped"]
    assert len(trace.model_turns()) == 2
    states = runtime.store.load_jit_states(variant.directory, session=runtime.session)
    assert states[candidate_id].status == PROMOTED


def test_trigger_match_override(tmp_path, catalog):
    backend = scripted({"": [text_turn("ok")]}, repeat={""})
    runtime = make_runtime(tmp_path, catalog, backend)
    target = make_target()
    profile = make_profile(catalog, target, overrides={"tool.exec": 1})
    runtime.register_skill(FIXTURES / "pptx_skill", [target], make_toolchain(catalog, profile))
    forced = runtime.execute_task(
        "pptx_skill",
        TaskRequest(task_id="f", text="unrelated words", target=target, trigger_match=True),
    )
    assert forced.trigger_matched


def test_turn_records_in_event_log(tmp_path, catalog):
    backend = scripted(
        {"make the pptx deck": [exec_turn("echo hi"), text_turn("done")]}
    )
    runtime = make_runtime(tmp_path, catalog, backend)
    target = make_target()
    profile = make_profile(catalog, target, overrides={"tool.exec": 1})
    runtime.register_skill(FIXTURES / "pptx_skill", [target], make_toolchain(catalog, profile))
    runtime.execute_task("pptx_skill", task("make the pptx deck"))

    events = runtime.store.read_events()
    kinds = [e["kind"] for e in events if e["type"] == "turn"]
    assert kinds[0] == "env_binding"
    assert kinds.count("model") == 2
    assert kinds.count("tool") == 1
    assert [e["type"] for e in events][-1] == "task"


def test_suite_sandbox_containment(tmp_path, catalog):
    """Snapshot diff: a full execution mutates nothing outside the store tree."""
    outside = tmp_path / "outside.txt"
    outside.write_text("untouched", encoding="utf-8")

    def snapshot():
        return {
            p.relative_to(tmp_path).as_posix(): p.stat().st_size
            for p in tmp_path.rglob("*")
            if p.is_file() and "store" not in p.parts
        }

    before = snapshot()
    backend = scripted(
        {"make the pptx deck": [exec_turn("echo x > inside.txt"), text_turn("done")]}
    )
    runtime = make_runtime(tmp_path, catalog, backend)
    target = make_target()
    profile = make_profile(catalog, target, overrides={"tool.exec": 1})
    runtime.register_skill(FIXTURES / "pptx_skill", [target], make_toolchain(catalog, profile))
    trace = runtime.execute_task("pptx_skill", task("make the pptx deck"))
    assert trace.outcome == "success"

    assert snapshot() == before
    assert (tmp_path / "store" / "sandbox" / "t1" / "inside.txt").is_file()
