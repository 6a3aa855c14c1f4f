"""Capability-gap compilation and the three-pass pipeline.

Pass 1 extracts capability requirements from the skill, compares each against
the target's profiled level, and picks a transform: a match needs nothing; a
small gap is compensated by rewriting the requirement's span to demand less
(explicit guidance, worked examples, absolute paths); a large or total gap
substitutes an equivalence-class alternative the target can satisfy; anything
else is recorded as unsupported without aborting. Pass 2 binds the
environment (manifest + probe + repair script) and Pass 3 extracts
concurrency structure. The bundle of compiled body, transform log,
annotations, env script and JIT candidates is content-addressed into a
variant id, so recompiling unchanged inputs reproduces the identical variant.
"""

from __future__ import annotations

import hashlib
import json
import re
import time
from dataclasses import dataclass, field
from typing import Callable

from . import concurrency as conc
from . import envbind
from .catalog import CapabilityCatalog
from .config import Policy
from .errors import CompileFailure, TransformBackendFailure, UnknownCapability
from .jit import JitCandidate
from .profiling import CapabilityProfile, TargetDescriptor
from .skills import SkillPackage, parse_skill_text

MATCH = "match"
COMPENSATE = "compensate"
SUBSTITUTE = "substitute"
UNSUPPORTED = "unsupported"

GUIDANCE_MARK = "> Guidance"


@dataclass(frozen=True)
class CapabilityRequirement:
    capability: str
    level: int
    source_span: tuple[int, int]
    equivalence_class: str = ""


@dataclass(frozen=True)
class AlternativePath:
    description: str
    requirements: tuple[CapabilityRequirement, ...]
    instructions: str


@dataclass(frozen=True)
class RequirementSet:
    requirements: tuple[CapabilityRequirement, ...]
    equivalence_classes: dict[str, tuple[AlternativePath, ...]] = field(default_factory=dict)


@dataclass(frozen=True)
class TransformDecision:
    kind: str  # match | compensate | substitute | unsupported
    gap: int = 0
    tactics: tuple[str, ...] = ()
    class_id: str = ""
    path_index: int = -1
    warning: str = ""


@dataclass(frozen=True)
class GapEntry:
    requirement: CapabilityRequirement
    required: int
    profiled: int
    decision: TransformDecision


@dataclass(frozen=True)
class GapReport:
    entries: tuple[GapEntry, ...]


@dataclass(frozen=True)
class TransformLogEntry:
    capability: str
    level: int
    kind: str
    source_span: tuple[int, int]
    original_text: str
    rewritten_text: str
    description: str

    def to_dict(self) -> dict:
        return {
            "capability": self.capability,
            "level": self.level,
            "kind": self.kind,
            "source_span": list(self.source_span),
            "original_text": self.original_text,
            "rewritten_text": self.rewritten_text,
            "description": self.description,
        }


@dataclass(frozen=True)
class SkillVariant:
    skill_id: str
    source_hash: str
    target: TargetDescriptor
    compiled_body: str
    frontmatter_text: str
    transform_log: tuple[TransformLogEntry, ...]
    annotations: tuple[conc.ExecutionAnnotation, ...]
    env_script: envbind.BindingScript
    jit_candidates: tuple[JitCandidate, ...]
    pass1_body: str
    gap_report: GapReport
    pass_timings: dict = field(default_factory=dict)
    variant_id: str = ""

    def compiled_text(self) -> str:
        return self.frontmatter_text + self.compiled_body


def variant_fingerprint(variant: SkillVariant) -> str:
    payload = {
        "skill_id": variant.skill_id,
        "source_hash": variant.source_hash,
        "model": variant.target.model_id,
        "harness": variant.target.harness_id,
        "compiled_body": variant.compiled_body,
        "transform_log": [e.to_dict() for e in variant.transform_log],
        "annotations": [a.to_dict() for a in variant.annotations],
        "env_script": variant.env_script.text,
        "jit_candidates": [c.to_dict() for c in variant.jit_candidates],
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def extract_requirements(skill: SkillPackage, analysis, catalog: CapabilityCatalog) -> RequirementSet:
    """Delegate to the analysis backend, validating emitted capability ids."""
    reqs = analysis.extract_requirements(skill)
    for req in reqs.requirements:
        if req.capability not in catalog:
            raise UnknownCapability(
                f"analysis backend emitted {req.capability!r}, not in catalog"
            )
    for paths in reqs.equivalence_classes.values():
        for path in paths:
            for req in path.requirements:
                if req.capability not in catalog:
                    raise UnknownCapability(
                        f"equivalence path requires unknown capability {req.capability!r}"
                    )
    return reqs


def _tactics_for(capability: str, gap: int) -> tuple[str, ...]:
    if capability == "tool.exec":
        tactics = ["inject_absolute_paths"]
    elif capability.startswith("follow."):
        tactics = ["make_steps_explicit"]
    elif capability.startswith("gen.format"):
        tactics = ["add_format_constraint"]
    else:
        tactics = ["add_worked_example"]
    if gap >= 2 and "add_format_constraint" not in tactics:
        tactics.append("add_format_constraint")
    return tuple(tactics)


def _path_residual_gap(path: AlternativePath, profile: CapabilityProfile) -> int:
    return sum(max(0, req.level - profile.level(req.capability)) for req in path.requirements)


def select_transform(
    req: CapabilityRequirement,
    profile: CapabilityProfile,
    classes: dict[str, tuple[AlternativePath, ...]],
    policy: Policy,
) -> TransformDecision:
    """Pure decision rule over (required, profiled, alternatives, policy)."""
    profiled = profile.level(req.capability)
    if profiled >= req.level:
        return TransformDecision(MATCH)

    gap = req.level - profiled
    if profiled >= 1 and gap <= policy.max_compensation_gap:
        return TransformDecision(COMPENSATE, gap=gap, tactics=_tactics_for(req.capability, gap))

    paths = classes.get(req.equivalence_class, ()) if req.equivalence_class else ()
    satisfiable = [
        (index, path)
        for index, path in enumerate(paths)
        if all(profile.level(r.capability) >= r.level for r in path.requirements)
    ]
    if satisfiable:
        index, _ = min(satisfiable, key=lambda ip: (_path_residual_gap(ip[1], profile), ip[0]))
        return TransformDecision(SUBSTITUTE, gap=gap, class_id=req.equivalence_class, path_index=index)

    return TransformDecision(
        UNSUPPORTED,
        gap=gap,
        tactics=_tactics_for(req.capability, gap),
        warning=(
            f"{req.capability} requires L{req.level} but the target profiles at "
            f"L{profiled} and no equivalence alternative is satisfiable; "
            f"best-effort tactics: {', '.join(_tactics_for(req.capability, gap))}"
        ),
    )


def build_gap_report(
    reqs: RequirementSet, profile: CapabilityProfile, policy: Policy
) -> GapReport:
    entries = tuple(
        GapEntry(
            requirement=req,
            required=req.level,
            profiled=profile.level(req.capability),
            decision=select_transform(req, profile, reqs.equivalence_classes, policy),
        )
        for req in reqs.requirements
    )
    return GapReport(entries)


def apply_transform(
    body: str,
    decision: TransformDecision,
    req: CapabilityRequirement,
    evidence: str,
    transform,
    reqs: RequirementSet,
    policy: Policy,
) -> tuple[str, TransformLogEntry]:
    """Render the span-local rewrite for one non-match decision.

    Returns the replacement text for req.source_span plus the audit log
    entry; a transform-backend failure leaves the span unmodified and records
    the unsupported warning instead.
    """
    start, end = req.source_span
    original = body[start:end]
    try:
        if decision.kind == SUBSTITUTE:
            path = reqs.equivalence_classes[decision.class_id][decision.path_index]
            rewritten = transform.render_substitution(original, req, path, policy)
            description = f"substituted span with equivalence path: {path.description}"
        else:
            rewritten = transform.render_compensation(original, req, decision, evidence, policy)
            description = "compensated with " + ", ".join(decision.tactics)
    except TransformBackendFailure as exc:
        return original, TransformLogEntry(
            capability=req.capability,
            level=req.level,
            kind=UNSUPPORTED,
            source_span=req.source_span,
            original_text=original,
            rewritten_text=original,
            description=f"transform backend failed, span left unmodified: {exc}",
        )
    return rewritten, TransformLogEntry(
        capability=req.capability,
        level=req.level,
        kind=decision.kind,
        source_span=req.source_span,
        original_text=original,
        rewritten_text=rewritten,
        description=description,
    )


def run_capability_pass(
    skill: SkillPackage,
    profile: CapabilityProfile,
    analysis,
    transform,
    catalog: CapabilityCatalog,
    policy: Policy,
    evidence: str = "",
) -> tuple[str, tuple[TransformLogEntry, ...], GapReport]:
    """Pass 1: requirements -> decisions -> span-local rewrites."""
    reqs = extract_requirements(skill, analysis, catalog)
    report = build_gap_report(reqs, profile, policy)

    # fold multiple decisions on the same span, then splice back-to-front
    by_span: dict[tuple[int, int], list[GapEntry]] = {}
    for entry in report.entries:
        if entry.decision.kind in (COMPENSATE, SUBSTITUTE):
            by_span.setdefault(entry.requirement.source_span, []).append(entry)

    log: list[TransformLogEntry] = []
    replacements: list[tuple[tuple[int, int], str]] = []
    taken: list[tuple[int, int]] = []
    for span in sorted(by_span, key=lambda s: (s[0], -s[1])):
        if any(span != other and span[0] < other[1] and other[0] < span[1] for other in taken):
            log.append(
                TransformLogEntry(
                    capability=by_span[span][0].requirement.capability,
                    level=by_span[span][0].required,
                    kind=UNSUPPORTED,
                    source_span=span,
                    original_text=skill.body[span[0]:span[1]],
                    rewritten_text=skill.body[span[0]:span[1]],
                    description="span overlaps an earlier rewrite; left unmodified",
                )
            )
            continue
        taken.append(span)
        current = skill.body[span[0]:span[1]]
        # path-rewriting transforms run before text-appending ones so the
        # appended guidance never gets its examples rewritten
        ordered = sorted(
            by_span[span],
            key=lambda e: 0 if "inject_absolute_paths" in e.decision.tactics else 1,
        )
        for entry in ordered:
            shifted_req = CapabilityRequirement(
                capability=entry.requirement.capability,
                level=entry.requirement.level,
                source_span=(0, len(current)),
                equivalence_class=entry.requirement.equivalence_class,
            )
            current, log_entry = apply_transform(
                current, entry.decision, shifted_req, evidence, transform, reqs, policy
            )
            log.append(
                TransformLogEntry(
                    capability=log_entry.capability,
                    level=log_entry.level,
                    kind=log_entry.kind,
                    source_span=span,
                    original_text=skill.body[span[0]:span[1]],
                    rewritten_text=current,
                    description=log_entry.description,
                )
            )
        replacements.append((span, current))

    compiled = skill.body
    for (start, end), text in sorted(replacements, key=lambda r: r[0][0], reverse=True):
        compiled = compiled[:start] + text + compiled[end:]

    for entry in report.entries:
        if entry.decision.kind == UNSUPPORTED:
            log.append(
                TransformLogEntry(
                    capability=entry.requirement.capability,
                    level=entry.required,
                    kind=UNSUPPORTED,
                    source_span=entry.requirement.source_span,
                    original_text=skill.body[
                        entry.requirement.source_span[0]:entry.requirement.source_span[1]
                    ],
                    rewritten_text="",
                    description=entry.decision.warning,
                )
            )

    return compiled, tuple(log), report


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------

@dataclass
class Toolchain:
    """Everything compile_skill needs besides the skill and target."""

    catalog: CapabilityCatalog
    analysis: object
    transform: object
    prober: envbind.HostProber
    profile: CapabilityProfile | None = None
    profile_loader: Callable[[TargetDescriptor], CapabilityProfile] | None = None

    def resolve_profile(self, target: TargetDescriptor) -> CapabilityProfile:
        if self.profile is not None:
            return self.profile
        if self.profile_loader is not None:
            return self.profile_loader(target)
        raise CompileFailure("no capability profile available for compilation", "pass1")


def compile_skill(
    skill: SkillPackage,
    target: TargetDescriptor,
    toolchain: Toolchain,
    policy: Policy = Policy(),
    evidence: str = "",
    clock: Callable[[], float] = time.time,
) -> SkillVariant:
    """Run all three passes and bundle the variant.

    Any pass's hard error aborts with a diagnostic naming the pass;
    unsupported decisions never abort.
    """
    timings: dict[str, float] = {}
    if not skill.body.strip():
        raise CompileFailure("skill body is empty; nothing to compile", "pass1")
    profile = toolchain.resolve_profile(target)

    t0 = clock()
    try:
        pass1_body, transform_log, gap_report = run_capability_pass(
            skill, profile, toolchain.analysis, toolchain.transform,
            toolchain.catalog, policy, evidence,
        )
    except CompileFailure:
        raise
    except Exception as exc:
        raise CompileFailure(f"capability pass failed: {exc}", "pass1") from exc
    timings["pass1"] = round(clock() - t0, 6)

    pass1_skill = parse_skill_text(skill.frontmatter_text + pass1_body, skill.id)
    pass1_skill = SkillPackage(
        id=pass1_skill.id,
        metadata=pass1_skill.metadata,
        body=pass1_skill.body,
        blocks=pass1_skill.blocks,
        resources=skill.resources,
        frontmatter_text=pass1_skill.frontmatter_text,
    )

    t0 = clock()
    try:
        manifest = envbind.extract_manifest(pass1_skill, toolchain.analysis)
        probes = [envbind.presence_check(entry, toolchain.prober) for entry in manifest.entries]
        env_script = envbind.emit_binding_script(manifest, probes, clock)
    except Exception as exc:
        raise CompileFailure(f"environment binding pass failed: {exc}", "pass2") from exc
    timings["pass2"] = round(clock() - t0, 6)

    t0 = clock()
    try:
        steps = conc.decompose_steps(pass1_skill, toolchain.analysis)
        dag = conc.build_dag(steps)
        opportunities = conc.classify_and_gate(dag, target.features)
        annotations, compiled_body = conc.emit_annotations(
            opportunities, dag, pass1_body, policy.dlp_fanout
        )
    except CompileFailure:
        raise
    except Exception as exc:
        raise CompileFailure(f"concurrency pass failed: {exc}", "pass3") from exc
    timings["pass3"] = round(clock() - t0, 6)

    jit_candidates = tuple(toolchain.analysis.generate_candidates(pass1_skill))

    variant = SkillVariant(
        skill_id=skill.id,
        source_hash=skill.content_hash(),
        target=target,
        compiled_body=compiled_body,
        frontmatter_text=skill.frontmatter_text,
        transform_log=transform_log,
        annotations=tuple(annotations),
        env_script=env_script,
        jit_candidates=jit_candidates,
        pass1_body=pass1_body,
        gap_report=gap_report,
        pass_timings=timings,
    )
    object.__setattr__(variant, "variant_id", variant_fingerprint(variant))
    return variant


# ---------------------------------------------------------------------------
# Heuristic requirement extraction (the deterministic analysis rules)
# ---------------------------------------------------------------------------

_LANG_CAPABILITY = {
    "shell": "gen.code.shell", "sh": "gen.code.shell", "bash": "gen.code.shell",
    "zsh": "gen.code.shell",
    "python": "gen.code.python", "py": "gen.code.python",
    "javascript": "gen.code.javascript", "js": "gen.code.javascript",
    "sql": "gen.code.sql",
    "json": "gen.format.json",
    "markdown": "gen.format.markdown", "md": "gen.format.markdown",
    "html": "gen.format.html",
}

_REL_PATH_RE = re.compile(
    r"(?<![\w$/.\-])((?:[\w.\-]+/)+[\w.\-*]+|[\w\-]+\.[A-Za-z][A-Za-z0-9]{0,4})\b"
)
_BRANCH_RE = re.compile(r"(?i)\b(if|otherwise|when|unless|else|depending)\b")
_LOOP_RE = re.compile(r"(?i)\b(repeat|for each|until|loop|iterate)\b")
_VERIFY_RE = re.compile(r"(?i)\b(verify|check|confirm|validate|re-?run)\b")


def code_fence_level(code: str, lang: str) -> int:
    """Construct-complexity level for a gen.code requirement."""
    if lang in ("shell", "sh", "bash", "zsh"):
        if re.search(r"\b(sed|awk)\b", code):
            return 3
        if re.search(r"\||>|\bfor\b|\bwhile\b", code):
            return 2
        return 1
    if lang in ("python", "py"):
        if re.search(r"\btry\b|\bexcept\b|\bclass\b", code):
            return 3
        if re.search(r"\bdef\b|\bfor\b|\bwhile\b|\bif\b", code):
            return 2
        return 1
    if lang in ("javascript", "js"):
        if re.search(r"\basync\b|\bawait\b", code):
            return 3
        if re.search(r"=>|\.then\(|\bfunction\b", code):
            return 2
        return 1
    if lang == "sql":
        if re.search(r"(?i)\bover\s*\(|\(\s*select\b", code):
            return 3
        if re.search(r"(?i)\bjoin\b|\bgroup\s+by\b", code):
            return 2
        return 1
    lines = [l for l in code.splitlines() if l.strip() and not l.strip().startswith("```")]
    return 1 if len(lines) <= 3 else 2


def command_lines(code: str) -> list[str]:
    return [
        l.strip()
        for l in code.splitlines()
        if l.strip() and not l.strip().startswith(("#", "```"))
    ]


def exec_level(code: str) -> int:
    """tool.exec level: single command / relative-path params / chained."""
    lines = command_lines(code)
    if any(re.search(r"&&|;", l) for l in lines) or len(lines) > 2:
        return 3
    if any(_REL_PATH_RE.search(l) for l in lines):
        return 2
    return 1


def procedure_level(items: list, text: str) -> int:
    """follow.procedure level from step count and structure markers."""
    if _LOOP_RE.search(text) and _VERIFY_RE.search(text):
        return 3
    if len(items) >= 5 and _BRANCH_RE.search(text):
        return 2
    if len(items) >= 8:
        return 2
    return 1


def _guidance_adjustment(body: str, span: tuple[int, int], capability: str) -> int:
    """Compensation guidance directly after a span lowers its demand by one."""
    window = body[span[1]: span[1] + 600]
    if f"{GUIDANCE_MARK} ({capability})" in window:
        return -1
    return 0


def heuristic_requirements(skill: SkillPackage, catalog: CapabilityCatalog) -> RequirementSet:
    """Deterministic requirement extraction over the skill's block structure."""
    requirements: list[CapabilityRequirement] = []
    classes = _load_equivalence_sidecar(skill)
    class_for: dict[str, str] = {}
    for class_id, (applies_to, _) in classes.items():
        for capability in applies_to:
            class_for[capability] = class_id

    def add(capability: str, level: int, span: tuple[int, int]) -> None:
        if capability not in catalog:
            return
        level = max(1, min(level + _guidance_adjustment(skill.body, span, capability),
                           catalog.get(capability).max_level))
        requirements.append(
            CapabilityRequirement(
                capability=capability,
                level=level,
                source_span=span,
                equivalence_class=class_for.get(capability, ""),
            )
        )

    from .skills import step_items

    for block in skill.blocks:
        if block.kind == "code":
            lang = block.lang.lower()
            capability = _LANG_CAPABILITY.get(lang)
            if capability:
                add(capability, code_fence_level(block.text, lang), block.span)
            if lang in ("shell", "sh", "bash", "zsh", ""):
                inner = "\n".join(block.text.splitlines()[1:-1])
                if command_lines(inner):
                    add("tool.exec", exec_level(inner), block.span)
        elif block.kind == "steps":
            items = step_items(block)
            if items:
                add("follow.procedure", procedure_level(items, block.text), block.span)

    eq_classes = {
        class_id: paths for class_id, (_, paths) in classes.items() if paths
    }
    return RequirementSet(requirements=tuple(requirements), equivalence_classes=eq_classes)


def _load_equivalence_sidecar(skill: SkillPackage) -> dict:
    """Read explicit equivalence classes from an equivalences.yaml resource."""
    resource = skill.resource("equivalences.yaml")
    if resource is None:
        return {}
    import yaml

    raw = yaml.safe_load(resource.data.decode("utf-8")) or {}
    classes: dict[str, tuple[list[str], tuple[AlternativePath, ...]]] = {}
    for entry in raw.get("classes", []):
        class_id = str(entry.get("id", ""))
        applies_to = [str(c) for c in entry.get("applies_to", [])]
        paths = tuple(
            AlternativePath(
                description=str(p.get("description", "")),
                requirements=tuple(
                    CapabilityRequirement(
                        capability=str(r["capability"]),
                        level=int(r["level"]),
                        source_span=(0, 0),  # sidecar paths have no body text
                    )
                    for r in p.get("requirements", [])
                ),
                instructions=str(p.get("instructions", "")),
            )
            for p in entry.get("alternatives", [])
        )
        classes[class_id] = (applies_to, paths)
    return classes
