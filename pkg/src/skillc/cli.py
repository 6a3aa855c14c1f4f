"""Operator command line: profile, compile, bind-env, run, inspect, simulate,
jit-status, history.

Exit codes: 0 success, 1 domain error (single machine-parsable ``E_*:`` line),
2 usage error. Every subcommand supports --json structured output. With the
scripted backend all clocks are frozen, so repeated invocations produce
byte-identical artifacts and event logs.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click
import yaml

from .analysis import HeuristicAnalysis, HeuristicTransform, InferenceAnalysis, InferenceTransform
from .backends import Fixture, HttpBackend, ScriptedBackend
from .catalog import load_catalog, load_default_catalog
from .compiler import Toolchain, compile_skill
from .config import Config, harness_features, load_config
from .envbind import FakeHost, RealHostProber, execute_binding
from .errors import SkillcError
from .profiling import ProfileCache, TargetDescriptor, profile_target
from .runtime import Runtime, TaskRequest
from .scheduler import SchedulerPolicy, load_signal_trace, simulate
from .skills import parse_skill_package, parse_skill_text
from .store import Store

FROZEN_CLOCK = lambda: 0.0  # noqa: E731  (scripted mode: deterministic artifacts)


def _echo_json(payload: dict) -> None:
    click.echo(json.dumps(payload, sort_keys=True, indent=2))


def domain_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except SkillcError as exc:
            click.echo(str(exc), err=True)
            sys.exit(1)

    return wrapper


def _load_cfg(ctx: click.Context) -> Config:
    params = ctx.find_root().params
    return load_config(params.get("config"), store_dir=params.get("store"))


def _catalog(cfg: Config):
    if cfg.catalog_path is not None:
        return load_catalog(cfg.catalog_path)
    return load_default_catalog()


def _backend(cfg: Config, backend_flag: str | None, model: str, fixtures: str | None):
    kind = backend_flag or cfg.backend
    if kind == "scripted":
        path = fixtures or cfg.fixtures_path
        if path:
            return ScriptedBackend.from_file(path), True
        return ScriptedBackend([Fixture(key="", turns=[{"content": "ok"}], repeat=True)]), True
    return (
        HttpBackend(cfg.endpoint or "http://localhost:8000/v1", model, api_key_env=cfg.api_key_env),
        False,
    )


def _target(cfg: Config, model: str, harness: str) -> TargetDescriptor:
    return TargetDescriptor(model, harness, harness_features(harness, cfg.harnesses))


def _toolchain(cfg: Config, catalog, backend, scripted: bool, profile=None, profile_loader=None):
    if scripted:
        analysis, transform = HeuristicAnalysis(catalog), HeuristicTransform()
    else:
        analysis, transform = InferenceAnalysis(catalog, backend), InferenceTransform(backend)
    return Toolchain(
        catalog=catalog,
        analysis=analysis,
        transform=transform,
        prober=RealHostProber(),
        profile=profile,
        profile_loader=profile_loader,
    )


@click.group(invoke_without_command=True)
@click.option("--config", type=click.Path(exists=True), default=None, help="Config file (YAML).")
@click.option("--store", type=click.Path(), default=None, help="Store directory override.")
@click.option("--show-config", is_flag=True, help="Print the resolved configuration and exit.")
@click.pass_context
def main(ctx, config, store, show_config):
    """Compile portable agent skills into target-specialized variants and run them."""
    if show_config:
        _echo_json(load_config(config, store_dir=store).show())
        ctx.exit(0)
    if ctx.invoked_subcommand is None:
        click.echo(ctx.get_help())
        ctx.exit(0)


# ---------------------------------------------------------------------------
# profile
# ---------------------------------------------------------------------------

@main.command()
@click.option("--model", required=True)
@click.option("--harness", required=True)
@click.option("--force", is_flag=True, help="Re-profile even on a cache hit.")
@click.option("--backend", "backend_flag", type=click.Choice(["scripted", "http"]), default=None)
@click.option("--fixtures", type=click.Path(exists=True), default=None)
@click.option("--json", "as_json", is_flag=True)
@click.pass_context
@domain_errors
def profile(ctx, model, harness, force, backend_flag, fixtures, as_json):
    """Measure the target's attained level for every primitive capability."""
    cfg = _load_cfg(ctx)
    catalog = _catalog(cfg)
    backend, scripted = _backend(cfg, backend_flag, model, fixtures)
    target = _target(cfg, model, harness)
    cache = ProfileCache(cfg.cache_dir)
    result = profile_target(
        target, catalog, backend, cache, force=force,
        clock=FROZEN_CLOCK if scripted else __import__("time").time,
    )
    if as_json:
        _echo_json(json.loads(result.to_json_bytes()))
    else:
        click.echo(f"profiled {model} on {harness} (catalog {result.catalog_version})")
        for capability, level in sorted(result.attained.items()):
            click.echo(f"  {capability}: L{level}")
        for cap, high, low in result.inconsistencies:
            click.echo(f"  inconsistency: {cap} passed L{high} but failed L{low}")


# ---------------------------------------------------------------------------
# compile
# ---------------------------------------------------------------------------

@main.command("compile")
@click.option("--skill", "skill_dir", required=True, type=click.Path(exists=True))
@click.option("--model", required=True)
@click.option("--harness", required=True)
@click.option("--policy", "policy_file", type=click.Path(exists=True), default=None)
@click.option("--backend", "backend_flag", type=click.Choice(["scripted", "http"]), default=None)
@click.option("--fixtures", type=click.Path(exists=True), default=None)
@click.option("--fake-host", type=click.Path(exists=True), default=None,
              help="Probe a declarative fake host instead of the real one.")
@click.option("--json", "as_json", is_flag=True)
@click.pass_context
@domain_errors
def compile_cmd(ctx, skill_dir, model, harness, policy_file, backend_flag, fixtures, fake_host, as_json):
    """Compile a skill package into a variant for (model, harness)."""
    cfg = _load_cfg(ctx)
    if policy_file:
        from .config import load_policy

        try:
            cfg.policy = load_policy(policy_file)
        except (ValueError, yaml.YAMLError) as exc:
            raise SkillcError(f"invalid policy file: {exc}") from exc
    catalog = _catalog(cfg)
    backend, scripted = _backend(cfg, backend_flag, model, fixtures)
    target = _target(cfg, model, harness)
    store = Store(cfg.store_dir)
    cache = ProfileCache(cfg.cache_dir)
    clock = FROZEN_CLOCK if scripted else __import__("time").time

    def loader(t: TargetDescriptor):
        return profile_target(t, catalog, backend, cache, clock=clock)

    toolchain = _toolchain(cfg, catalog, backend, scripted, profile_loader=loader)
    if fake_host:
        toolchain.prober = fake_host_from_file(fake_host)

    package = parse_skill_package(skill_dir)
    variant = compile_skill(package, target, toolchain, cfg.policy, clock=clock)
    directory = store.write_variant(variant)
    store.register(package.id, package.content_hash(), str(Path(skill_dir).resolve()), target, variant.variant_id)

    if as_json:
        _echo_json(
            {
                "variant_id": variant.variant_id,
                "directory": str(directory),
                "decisions": [
                    {"capability": e.requirement.capability, "decision": e.decision.kind}
                    for e in variant.gap_report.entries
                ],
                "annotations": len(variant.annotations),
                "jit_candidates": len(variant.jit_candidates),
            }
        )
    else:
        click.echo(f"variant {variant.variant_id[:12]} written to {directory}")
        for entry in variant.gap_report.entries:
            click.echo(
                f"  {entry.requirement.capability}@L{entry.required} "
                f"(profiled L{entry.profiled}): {entry.decision.kind}"
            )


# ---------------------------------------------------------------------------
# bind-env
# ---------------------------------------------------------------------------

def fake_host_from_file(path: str | Path) -> FakeHost:
    raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    return FakeHost(
        packages={k: set(v) for k, v in (raw.get("packages") or {}).items()},
        tools=set(raw.get("tools") or ()),
        services=set(raw.get("services") or ()),
        package_managers=tuple(raw.get("package_managers") or ("pip", "npm", "apt-get")),
        service_manager=str(raw.get("service_manager", "service")),
    )


@main.command("bind-env")
@click.option("--variant", "variant_dir", required=True, type=click.Path(exists=True))
@click.option("--fake-host", type=click.Path(exists=True), default=None)
@click.option("--dry-run", is_flag=True, help="Print the script without executing it.")
@click.option("--yes", is_flag=True, help="Allow system-manager repairs.")
@click.option("--json", "as_json", is_flag=True)
@click.pass_context
@domain_errors
def bind_env(ctx, variant_dir, fake_host, dry_run, yes, as_json):
    """Execute (or print) a variant's environment binding script."""
    cfg = _load_cfg(ctx)
    script_path = Path(variant_dir) / "env-bind.sh"
    if not script_path.is_file():
        raise SkillcError(f"{variant_dir} has no env-bind.sh")
    text = script_path.read_text(encoding="utf-8")
    if dry_run:
        click.echo(text, nl=False)
        return

    env = None
    host = None
    if fake_host:
        host = fake_host_from_file(fake_host)
        env = host.materialize(Path(cfg.store_dir) / "fakehost")
    outcome = execute_binding(text, env=env, assume_yes=yes, lock_path=script_path)
    if host is not None:
        host.sync()
    if as_json:
        _echo_json({"status": outcome.status, "stdout": outcome.stdout})
    else:
        click.echo(outcome.stdout, nl=False)
    sys.exit(0 if outcome.ok else 1)


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

@main.command()
@click.option("--skill", "skill_id", required=True)
@click.option("--task", "task_file", required=True, type=click.Path(exists=True))
@click.option("--model", required=True)
@click.option("--harness", required=True)
@click.option("--backend", "backend_flag", type=click.Choice(["scripted", "http"]), default=None)
@click.option("--fixtures", type=click.Path(exists=True), default=None)
@click.option("--no-jit", is_flag=True, help="Disable code solidification for this run.")
@click.option("--fake-host", type=click.Path(exists=True), default=None)
@click.option("--json", "as_json", is_flag=True)
@click.pass_context
@domain_errors
def run(ctx, skill_id, task_file, model, harness, backend_flag, fixtures, no_jit, fake_host, as_json):
    """Execute a task against a registered skill."""
    cfg = _load_cfg(ctx)
    catalog = _catalog(cfg)
    backend, scripted = _backend(cfg, backend_flag, model, fixtures)
    target = _target(cfg, model, harness)
    store = Store(cfg.store_dir)

    raw = yaml.safe_load(Path(task_file).read_text(encoding="utf-8")) or {}
    request = TaskRequest(
        task_id=str(raw.get("id", Path(task_file).stem)),
        text=str(raw.get("text", "")),
        target=target,
        params=dict(raw.get("params", {})),
    )

    bind_env_vars = None
    if fake_host:
        host = fake_host_from_file(fake_host)
        bind_env_vars = host.materialize(Path(cfg.store_dir) / "fakehost")

    runtime = Runtime(
        store,
        catalog,
        backend,
        policy=cfg.policy,
        clock=FROZEN_CLOCK if scripted else __import__("time").time,
        unit_latency=scripted,
        session=request.task_id,
    )
    trace = runtime.execute_task(
        skill_id, request, bind_env=bind_env_vars, use_jit=not no_jit,
    )
    payload = {
        "task": trace.task_id,
        "outcome": trace.outcome,
        "failure_kind": trace.failure_kind,
        "variant": trace.variant_id,
        "model_turns": len(trace.model_turns()),
        "dispatch_turns": trace.dispatch_turns(),
        "bypasses": len(trace.bypass_turns()),
        "tokens_in": trace.tokens_in,
        "tokens_out": trace.tokens_out,
        "retries": trace.retries,
        "trigger_matched": trace.trigger_matched,
        "final_text": trace.final_text,
    }
    if as_json:
        _echo_json(payload)
    else:
        click.echo(
            f"{trace.task_id}: {trace.outcome} "
            f"({payload['model_turns']} model turns, {payload['bypasses']} bypasses, "
            f"{trace.tokens_in}+{trace.tokens_out} tokens)"
        )


# ---------------------------------------------------------------------------
# inspect
# ---------------------------------------------------------------------------

@main.command()
@click.option("--variant", "variant_dir", required=True, type=click.Path(exists=True))
@click.option("--dag", "show_dag", is_flag=True, help="Print the workflow DAG and stages.")
@click.option("--json", "as_json", is_flag=True)
@click.pass_context
@domain_errors
def inspect(ctx, variant_dir, show_dag, as_json):
    """Inspect a compiled variant: decisions, DAG, annotations."""
    cfg = _load_cfg(ctx)
    store = Store(cfg.store_dir)
    variant = store.load_variant_dir(variant_dir)
    payload: dict = {
        "variant_id": variant.variant_id,
        "decisions": variant.manifest.get("decisions", []),
        "annotations": [a.to_dict() for a in variant.annotations],
    }
    if show_dag:
        from .concurrency import build_dag

        skill = parse_skill_text(variant.compiled_text, str(variant.manifest.get("skill_id", "skill")))
        analysis = HeuristicAnalysis(_catalog(cfg))
        dag = build_dag(analysis.decompose_steps(skill))
        payload["dag"] = {
            "steps": [
                {
                    "id": s.id,
                    "description": s.description,
                    "consumes": sorted(s.consumes),
                    "produces": sorted(s.produces),
                }
                for s in dag.steps
            ],
            "edges": [list(e) for e in dag.edges],
            "stages": [list(stage) for stage in dag.stages],
        }
    if as_json:
        _echo_json(payload)
        return
    click.echo(f"variant {variant.variant_id[:12]}")
    for d in payload["decisions"]:
        click.echo(f"  {d['capability']}@L{d['required']}: {d['decision']}")
    if show_dag:
        for s in payload["dag"]["steps"]:
            click.echo(f"  step {s['id']}: consumes={s['consumes']} produces={s['produces']}")
        for e in payload["dag"]["edges"]:
            click.echo(f"  edge {e[0]} -> {e[1]}")
        for i, stage in enumerate(payload["dag"]["stages"]):
            click.echo(f"  stage {i}: {', '.join(stage)}")


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

@main.command()
@click.option("--signals", "signals_file", required=True, type=click.Path(exists=True))
@click.option("--dag", "dag_file", required=True, type=click.Path(exists=True))
@click.option("--json", "as_json", is_flag=True)
@click.pass_context
@domain_errors
def simulate_cmd(ctx, signals_file, dag_file, as_json):
    """Replay a signal trace against a DAG; print the admission timeline."""
    trace = load_signal_trace(signals_file)
    raw = yaml.safe_load(Path(dag_file).read_text(encoding="utf-8")) or {}
    durations = [int(a.get("duration", 1)) for a in raw.get("agents", [])] or list(
        map(int, raw.get("durations", []))
    )
    policy = SchedulerPolicy(**raw.get("policy", {}))
    result = simulate(trace, durations, policy)
    if as_json:
        _echo_json(
            {
                "timeline": [
                    {
                        "tick": r.tick,
                        "breached": list(r.breached),
                        "launched": list(r.launched),
                        "suspended": list(r.suspended),
                        "resumed": list(r.resumed),
                        "running": list(r.running),
                        "throttled": r.throttled,
                    }
                    for r in result.timeline
                ],
                "completed": list(result.completed),
                "effective_concurrency": result.effective_concurrency,
            }
        )
        return
    for r in result.timeline:
        flags = []
        if r.launched:
            flags.append("launch " + ",".join(r.launched))
        if r.suspended:
            flags.append("suspend " + ",".join(r.suspended))
        if r.resumed:
            flags.append("resume " + ",".join(r.resumed))
        state = f"running={len(r.running)}"
        if r.breached:
            state += f" pressure={','.join(r.breached)}"
        click.echo(f"tick {r.tick:3d}: {state}" + (f" | {'; '.join(flags)}" if flags else ""))
    click.echo(f"completed: {len(result.completed)}; effective concurrency: {result.effective_concurrency}")


# ---------------------------------------------------------------------------
# jit-status / history
# ---------------------------------------------------------------------------

@main.command("jit-status")
@click.option("--skill", "skill_id", required=True)
@click.option("--model", required=True)
@click.option("--harness", required=True)
@click.option("--json", "as_json", is_flag=True)
@click.pass_context
@domain_errors
def jit_status(ctx, skill_id, model, harness, as_json):
    """Print per-candidate solidification state, counters, bypass stats."""
    cfg = _load_cfg(ctx)
    store = Store(cfg.store_dir)
    target = _target(cfg, model, harness)
    variant = store.load_variant(skill_id, target)
    states = store.load_jit_states(variant.directory)  # raw persisted view
    payload = []
    for candidate in variant.candidates:
        state = states.get(candidate.id)
        payload.append(
            {
                "id": candidate.id,
                "keywords": list(candidate.keywords),
                "slots": [s.name for s in candidate.param_schema],
                "status": state.status if state else "observing",
                "consecutive": state.consecutive if state else 0,
                "bypasses": state.bypasses if state else 0,
                "failures": state.failures if state else 0,
            }
        )
    if as_json:
        _echo_json({"candidates": payload})
        return
    for c in payload:
        click.echo(
            f"{c['id']}: {c['status']} (consecutive={c['consecutive']}, "
            f"bypasses={c['bypasses']}, failures={c['failures']}, slots={','.join(c['slots'])})"
        )


@main.command()
@click.option("--skill", "skill_id", required=True)
@click.option("--model", required=True)
@click.option("--harness", required=True)
@click.option("--json", "as_json", is_flag=True)
@click.pass_context
@domain_errors
def history(ctx, skill_id, model, harness, as_json):
    """Print variant scores and the active/best pointers."""
    cfg = _load_cfg(ctx)
    store = Store(cfg.store_dir)
    target = _target(cfg, model, harness)
    store.registered(skill_id)
    data = store.load_history(skill_id, target)
    if as_json:
        _echo_json(data)
        return
    for entry in data["entries"]:
        score = entry["score_sum"] / entry["n"] if entry["n"] else 0.0
        click.echo(f"{entry['variant_id'][:12]}: score={score:.2f} n={entry['n']}")
    click.echo(f"active: {data['active'][:12] if data['active'] else '(none)'}")
    click.echo(f"best:   {data['best'][:12] if data['best'] else '(none)'}")


if __name__ == "__main__":
    main()
