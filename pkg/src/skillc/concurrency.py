"""Concurrency extraction: workflow DAG building and parallel-structure marks.

Decomposes a compiled skill into steps with consumed/produced artifacts,
builds the dependency DAG (edge A->B iff B consumes an output of A), layers
it into ASAP stages by longest incoming path, classifies data-, instruction-
and thread-level opportunities, gates them on harness features, and emits
execution annotations plus the data-parallel body rewrites. Opportunities
whose required harness feature is missing resolve to a sequential fallback.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field

from .errors import BindingGap, CyclicWorkflow
from .skills import Block, SkillPackage, step_items

logger = logging.getLogger(__name__)

_ARTIFACT_RE = re.compile(
    r"\b[\w-]+\.(?:json|csv|txt|log|md|yaml|yml|html|pdf|pptx|xml|png)\b"
)
_INPUT_RE = re.compile(r"(?im)^\s*(?:-\s*)?inputs?:\s*(.+)$")
_OUTPUT_RE = re.compile(r"(?im)^\s*(?:-\s*)?outputs?:\s*(.+)$")
_ITEMS_RE = re.compile(r"(?i)\beach of\s+(?:the\s+)?(\d+)\b|\b(\d+)\s+(?:\w+\s+)?files\b")
_MULTI_TURN_RE = re.compile(r"(?i)\b(debug|investigate|diagnose|troubleshoot|bisect|research)\w*\b")

DLP = "dlp"
ILP = "ilp"
TLP = "tlp"


@dataclass(frozen=True)
class WorkflowStep:
    id: str
    description: str
    consumes: frozenset[str] = frozenset()
    produces: frozenset[str] = frozenset()
    internal_items: int = 0
    multi_turn: bool = False
    span: tuple[int, int] = (0, 0)
    fence: Block | None = None  # code block attached to this step, if any


@dataclass(frozen=True)
class WorkflowDag:
    steps: tuple[WorkflowStep, ...]
    edges: tuple[tuple[str, str], ...]
    stages: tuple[tuple[str, ...], ...]

    def step(self, step_id: str) -> WorkflowStep:
        for s in self.steps:
            if s.id == step_id:
                return s
        raise KeyError(step_id)


@dataclass(frozen=True)
class SubAgentBlock:
    step_id: str
    task: str
    inputs: tuple[str, ...]
    output: str
    output_note: str = ""


@dataclass(frozen=True)
class ParallelOpportunity:
    kind: str  # dlp | ilp | tlp
    step_ids: tuple[str, ...]
    required_feature: str  # "" | batch_dispatch | subagent_spawn
    resolution: str  # applied | sequential_fallback
    reason: str = ""
    item_count: int = 0
    blocks: tuple[SubAgentBlock, ...] = ()


@dataclass(frozen=True)
class ExecutionAnnotation:
    kind: str  # dlp | ilp_stage | subagent
    step_ids: tuple[str, ...]
    payload: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "steps": list(self.step_ids), **self.payload}


# ---------------------------------------------------------------------------
# Heuristic step decomposition
# ---------------------------------------------------------------------------

def _artifact_names(text: str) -> tuple[list[str], list[str], list[str]]:
    """Return (explicit inputs, explicit outputs, bare filename mentions)."""

    def split_list(raw: str) -> list[str]:
        return [t.strip() for t in raw.split(",") if t.strip()]

    inputs: list[str] = []
    outputs: list[str] = []
    for m in _INPUT_RE.finditer(text):
        inputs.extend(split_list(m.group(1)))
    for m in _OUTPUT_RE.finditer(text):
        outputs.extend(split_list(m.group(1)))
    marked = set(inputs) | set(outputs)
    mentions = [
        m.group(0) for m in _ARTIFACT_RE.finditer(text) if m.group(0) not in marked
    ]
    return inputs, outputs, mentions


def _item_count(text: str) -> int:
    m = _ITEMS_RE.search(text)
    if not m:
        return 0
    return int(m.group(1) or m.group(2))


def heuristic_steps(skill: SkillPackage) -> list[WorkflowStep]:
    """Decompose numbered items into steps; prose-only bodies yield <=1 step.

    Artifact names come from explicit input:/output: markers and bare
    filename mentions; the first mention of a name produces it, later
    mentions consume it. A code fence directly after a steps block attaches
    to that block's last item.
    """
    raw: list[dict] = []
    blocks = skill.blocks
    for index, block in enumerate(blocks):
        if block.kind != "steps":
            continue
        items = step_items(block)
        offset = block.span[0]
        for number, text in items:
            raw.append({"text": text, "span": (offset, offset), "fence": None})
        if raw and index + 1 < len(blocks) and blocks[index + 1].kind == "code":
            raw[-1]["fence"] = blocks[index + 1]

    if not raw:
        if not skill.body.strip():
            return []
        description = " ".join(skill.body.split())[:160]
        inputs, outputs, mentions = _artifact_names(skill.body)
        produces = set(outputs) | set(mentions)
        return [
            WorkflowStep(
                id="s1",
                description=description,
                consumes=frozenset(set(inputs) - produces),
                produces=frozenset(produces),
                internal_items=_item_count(skill.body),
                multi_turn=bool(_MULTI_TURN_RE.search(skill.body)),
                span=(0, len(skill.body)),
            )
        ]

    steps: list[WorkflowStep] = []
    seen_produced: set[str] = set()
    for n, item in enumerate(raw, start=1):
        fence: Block | None = item["fence"]
        text = item["text"] + ("\n" + fence.text if fence else "")
        inputs, outputs, mentions = _artifact_names(text)
        consumes = set(inputs)
        produces = set(outputs)
        for name in mentions:
            if name in seen_produced:
                consumes.add(name)
            else:
                produces.add(name)
        consumes -= produces  # no self-edges
        seen_produced |= produces
        steps.append(
            WorkflowStep(
                id=f"s{n}",
                description=" ".join(item["text"].split()),
                consumes=frozenset(consumes),
                produces=frozenset(produces),
                internal_items=_item_count(item["text"]),
                multi_turn=bool(_MULTI_TURN_RE.search(item["text"])),
                span=item["span"],
                fence=fence,
            )
        )
    return steps


def decompose_steps(skill: SkillPackage, analysis) -> list[WorkflowStep]:
    return analysis.decompose_steps(skill)


# ---------------------------------------------------------------------------
# DAG construction and layering
# ---------------------------------------------------------------------------

def _find_cycle(step_ids: list[str], succ: dict[str, set[str]]) -> list[str]:
    state: dict[str, int] = {}
    stack: list[str] = []

    def visit(node: str) -> list[str] | None:
        state[node] = 1
        stack.append(node)
        for nxt in sorted(succ.get(node, ())):
            if state.get(nxt) == 1:
                return stack[stack.index(nxt):] + [nxt]
            if state.get(nxt, 0) == 0:
                found = visit(nxt)
                if found:
                    return found
        state[node] = 2
        stack.pop()
        return None

    for sid in step_ids:
        if state.get(sid, 0) == 0:
            found = visit(sid)
            if found:
                return found
    return []


def build_dag(steps: list[WorkflowStep]) -> WorkflowDag:
    """Edges exactly per the consumes/produces rule; stages by longest path."""
    producers: dict[str, list[str]] = {}
    for step in steps:
        for artifact in step.produces:
            producers.setdefault(artifact, []).append(step.id)

    edges: list[tuple[str, str]] = []
    succ: dict[str, set[str]] = {}
    pred: dict[str, set[str]] = {}
    for step in steps:
        for artifact in sorted(step.consumes):
            for producer in producers.get(artifact, []):
                if producer == step.id:
                    continue
                edge = (producer, step.id)
                if edge not in edges:
                    edges.append(edge)
                succ.setdefault(producer, set()).add(step.id)
                pred.setdefault(step.id, set()).add(producer)

    ids = [s.id for s in steps]
    cycle = _find_cycle(ids, succ)
    if cycle:
        raise CyclicWorkflow("workflow cycle: " + " -> ".join(cycle))

    # longest incoming path, computed in topological order
    depth: dict[str, int] = {}
    remaining = {sid: len(pred.get(sid, ())) for sid in ids}
    frontier = [sid for sid in ids if remaining[sid] == 0]
    order: list[str] = []
    while frontier:
        sid = frontier.pop(0)
        order.append(sid)
        depth[sid] = max((depth[p] + 1 for p in pred.get(sid, ())), default=0)
        for nxt in sorted(succ.get(sid, ())):
            remaining[nxt] -= 1
            if remaining[nxt] == 0:
                frontier.append(nxt)

    stages: dict[int, list[str]] = {}
    for sid in ids:
        stages.setdefault(depth[sid], []).append(sid)
    ordered_stages = tuple(tuple(stages[k]) for k in sorted(stages))
    return WorkflowDag(steps=tuple(steps), edges=tuple(edges), stages=ordered_stages)


# ---------------------------------------------------------------------------
# Opportunity classification and annotation emission
# ---------------------------------------------------------------------------

def classify_and_gate(dag: WorkflowDag, features) -> list[ParallelOpportunity]:
    """Map DAG structure to DLP/ILP/TLP opportunities, gated on the harness."""
    opportunities: list[ParallelOpportunity] = []

    for step in dag.steps:
        if step.internal_items >= 2:
            opportunities.append(
                ParallelOpportunity(
                    kind=DLP,
                    step_ids=(step.id,),
                    required_feature="",
                    resolution="applied",  # DLP needs no harness support
                    item_count=step.internal_items,
                )
            )

    for stage in dag.stages:
        members = [dag.step(sid) for sid in stage]
        single_turn = [s for s in members if not s.multi_turn]
        multi_turn = [s for s in members if s.multi_turn]

        if len(single_turn) >= 2:
            ok = features.batch_dispatch
            opportunities.append(
                ParallelOpportunity(
                    kind=ILP,
                    step_ids=tuple(s.id for s in single_turn),
                    required_feature="batch_dispatch",
                    resolution="applied" if ok else "sequential_fallback",
                    reason="" if ok else "harness lacks batch_dispatch",
                )
            )
        if len(multi_turn) >= 2:
            ok = features.subagent_spawn
            blocks = tuple(
                SubAgentBlock(
                    step_id=s.id,
                    task=s.description,
                    inputs=tuple(sorted(s.consumes)),
                    output=min(s.produces) if s.produces else f"{s.id}.result",
                    output_note="artifact consumed by the parent workflow",
                )
                for s in multi_turn
            )
            opportunities.append(
                ParallelOpportunity(
                    kind=TLP,
                    step_ids=tuple(s.id for s in multi_turn),
                    required_feature="subagent_spawn",
                    resolution="applied" if ok else "sequential_fallback",
                    reason="" if ok else "harness lacks subagent_spawn",
                    blocks=blocks,
                )
            )
    return opportunities


_DLP_MECHANISM = {
    "shell": "shell job control",
    "sh": "shell job control",
    "bash": "shell job control",
    "python": "multiprocessing pool",
    "py": "multiprocessing pool",
    "javascript": "Promise.all",
    "js": "Promise.all",
}


def _rewrite_shell_fence(fence: Block, fanout: int) -> str:
    lines = fence.text.splitlines(keepends=True)
    opening, closing = lines[0], lines[-1]
    body = "".join(lines[1:-1]).rstrip("\n")
    indented = "\n".join("  " + l for l in body.splitlines())
    rewritten = (
        f"{opening}"
        f"# run per-item work concurrently (bounded fan-out {fanout})\n"
        "process_one() {\n"
        '  item="$1"\n'
        f"{indented}\n"
        "}\n"
        "n=0\n"
        "for item in \"$@\"; do\n"
        "  process_one \"$item\" &\n"
        f"  n=$((n+1)); [ $((n % {fanout})) -eq 0 ] && wait\n"
        "done\n"
        "wait\n"
        f"{closing}"
    )
    return rewritten


def _dlp_rewrite(body: str, step: WorkflowStep, fanout: int) -> tuple[str, str]:
    """Rewrite the step's fence (or append an instruction) to a concurrent idiom."""
    lang = (step.fence.lang.lower() if step.fence else "shell") or "shell"
    mechanism = _DLP_MECHANISM.get(lang, "shell job control")
    if step.fence is not None and mechanism == "shell job control":
        new_fence = _rewrite_shell_fence(step.fence, fanout)
        start, end = step.fence.span
        return body[:start] + new_fence + body[end:], mechanism
    if step.fence is not None:
        start, end = step.fence.span
        note = (
            f"\nProcess the {step.internal_items} items concurrently using "
            f"{mechanism} with a fan-out of {fanout} instead of one at a time.\n"
        )
        return body[:end] + note + body[end:], mechanism
    note = (
        f"\nProcess the {step.internal_items} items of step {step.id} concurrently "
        f"using {mechanism} with a fan-out of {fanout}.\n"
    )
    return body + note, mechanism


def emit_annotations(
    opportunities: list[ParallelOpportunity],
    dag: WorkflowDag,
    body: str,
    fanout: int = 4,
) -> tuple[list[ExecutionAnnotation], str]:
    """Emit annotations for applied opportunities; DLP also rewrites the body.

    ILP annotations carry the full output->input binding map for every edge
    leaving the stage; a stage edge with no resolvable artifact is an
    internal consistency failure (BindingGap).
    """
    annotations: list[ExecutionAnnotation] = []
    new_body = body

    # apply DLP rewrites back-to-front so earlier spans stay valid
    dlp_ops = sorted(
        (op for op in opportunities if op.kind == DLP and op.resolution == "applied"),
        key=lambda op: dag.step(op.step_ids[0]).fence.span[0] if dag.step(op.step_ids[0]).fence else 0,
        reverse=True,
    )
    for op in dlp_ops:
        step = dag.step(op.step_ids[0])
        new_body, mechanism = _dlp_rewrite(new_body, step, fanout)
        annotations.append(
            ExecutionAnnotation(
                kind="dlp",
                step_ids=op.step_ids,
                payload={"items": op.item_count, "fanout": fanout, "mechanism": mechanism},
            )
        )

    consumers: dict[str, set[str]] = {}
    for step in dag.steps:
        for artifact in step.consumes:
            consumers.setdefault(artifact, set()).add(step.id)

    for op in opportunities:
        if op.resolution != "applied":
            logger.info(
                "%s over %s falls back to sequential execution: %s",
                op.kind.upper(), ",".join(op.step_ids), op.reason,
            )
            continue
        if op.kind == ILP:
            bindings = []
            stage_set = set(op.step_ids)
            for src, dst in dag.edges:
                if src not in stage_set or dst in stage_set:
                    continue
                artifacts = sorted(dag.step(src).produces & dag.step(dst).consumes)
                if not artifacts:
                    raise BindingGap(f"stage edge {src}->{dst} has no shared artifact")
                for artifact in artifacts:
                    bindings.append({"from": src, "artifact": artifact, "to": dst})
            annotations.append(
                ExecutionAnnotation(kind="ilp_stage", step_ids=op.step_ids, payload={"bindings": bindings})
            )
        elif op.kind == TLP:
            for block in op.blocks:
                annotations.append(
                    ExecutionAnnotation(
                        kind="subagent",
                        step_ids=(block.step_id,),
                        payload={
                            "task": block.task,
                            "inputs": list(block.inputs),
                            "output": block.output,
                            "output_note": block.output_note,
                        },
                    )
                )
    return annotations, new_body


def annotations_payload(annotations: list[ExecutionAnnotation]) -> dict:
    """Shape annotations into the variant's annotations-file structure."""
    return {
        "stages": [
            {"steps": list(a.step_ids), "bindings": a.payload.get("bindings", [])}
            for a in annotations
            if a.kind == "ilp_stage"
        ],
        "subagents": [
            {"step": a.step_ids[0], **{k: v for k, v in a.payload.items()}}
            for a in annotations
            if a.kind == "subagent"
        ],
        "dlp": [
            {"step": a.step_ids[0], **a.payload} for a in annotations if a.kind == "dlp"
        ],
    }


def annotations_from_payload(payload: dict) -> list[ExecutionAnnotation]:
    annotations = []
    for stage in payload.get("stages", []):
        annotations.append(
            ExecutionAnnotation("ilp_stage", tuple(stage.get("steps", [])), {"bindings": stage.get("bindings", [])})
        )
    for sub in payload.get("subagents", []):
        fields = {k: v for k, v in sub.items() if k != "step"}
        annotations.append(ExecutionAnnotation("subagent", (sub.get("step", ""),), fields))
    for dlp in payload.get("dlp", []):
        fields = {k: v for k, v in dlp.items() if k != "step"}
        annotations.append(ExecutionAnnotation("dlp", (dlp.get("step", ""),), fields))
    return annotations
