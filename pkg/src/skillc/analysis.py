"""Analysis and transform backends.

Both the compiler passes and JIT candidate mining consult a pluggable
analysis backend (text in, structured result out). The heuristic
implementation is deterministic rule-based extraction and is what every
acceptance test runs on; the inference-backed implementation delegates the
open-vocabulary judgment calls to a model and falls back to the heuristic
whenever the model's output cannot be used.
"""

from __future__ import annotations

import json
import logging
import re

from .backends import InferenceBackend, InferenceRequest, Message
from .catalog import CapabilityCatalog
from .compiler import (
    GUIDANCE_MARK,
    CapabilityRequirement,
    RequirementSet,
    TransformDecision,
    _REL_PATH_RE,
    heuristic_requirements,
)
from .concurrency import WorkflowStep, heuristic_steps
from .config import Policy
from .envbind import DependencyEntry, heuristic_dependencies
from .errors import TransformBackendFailure
from .jit import JitCandidate, make_candidate
from .skills import SkillPackage

logger = logging.getLogger(__name__)

_HEADING_RE = re.compile(r"(?m)^#{1,6}\s+(.+)$")
_LANG_ALIASES = {"sh": "shell", "bash": "shell", "zsh": "shell", "py": "python", "js": "javascript"}


def heuristic_candidates(skill: SkillPackage) -> list[JitCandidate]:
    """Mine code fences for parameterized command patterns."""
    candidates: list[JitCandidate] = []
    counter = 0
    last_heading_words: tuple[str, ...] = ()
    for block in skill.blocks:
        if block.kind == "prose":
            headings = _HEADING_RE.findall(block.text)
            if headings:
                last_heading_words = tuple(
                    w.lower() for w in re.findall(r"[A-Za-z][\w-]+", headings[-1]) if len(w) > 2
                )
            continue
        if block.kind != "code":
            continue
        lang = _LANG_ALIASES.get(block.lang.lower(), block.lang.lower()) or "shell"
        lines = block.text.splitlines()
        inner = "\n".join(lines[1:-1]) if len(lines) >= 2 else ""
        keywords = tuple(
            dict.fromkeys(tuple(skill.metadata.triggers) + last_heading_words)
        ) or (skill.metadata.name,)
        candidate = make_candidate(f"{skill.id}.jit{counter}", inner, lang, keywords)
        if candidate is not None:
            candidates.append(candidate)
            counter += 1
    return candidates


class HeuristicAnalysis:
    """Deterministic rule-based analysis; always available."""

    def __init__(self, catalog: CapabilityCatalog):
        self.catalog = catalog

    def extract_requirements(self, skill: SkillPackage) -> RequirementSet:
        return heuristic_requirements(skill, self.catalog)

    def extract_dependencies(self, skill: SkillPackage) -> list[DependencyEntry]:
        return heuristic_dependencies(skill)

    def decompose_steps(self, skill: SkillPackage) -> list[WorkflowStep]:
        return heuristic_steps(skill)

    def generate_candidates(self, skill: SkillPackage) -> list[JitCandidate]:
        return heuristic_candidates(skill)


_WORKED_EXAMPLES = {
    "gen": (
        "Worked example: produce one small, complete output first (a single "
        "command or block), confirm it is valid, then extend it."
    ),
    "reason": (
        "Worked example: write out each intermediate result explicitly before "
        "combining them into the final answer."
    ),
    "tool": (
        "Worked example: run one command, inspect its output, and only then "
        "issue the next command."
    ),
    "follow": (
        "Worked example: restate the step you are on before performing it, "
        "then report its completion."
    ),
}


def rewrite_relative_paths(text: str) -> str:
    """Prefix relative file paths with $SKILL_DIR inside a rewritten span."""

    def sub(match: re.Match) -> str:
        token = match.group(1)
        return f"$SKILL_DIR/{token}"

    lines = []
    for line in text.splitlines(keepends=True):
        if line.lstrip().startswith(("#", "```", ">")):
            lines.append(line)
        else:
            lines.append(_REL_PATH_RE.sub(sub, line))
    return "".join(lines)


def _cap_insert(text: str, max_tokens: int) -> str:
    limit = max_tokens * 4  # 1 token ~ 4 chars
    if len(text) <= limit:
        return text
    cut = text[:limit]
    boundary = max(cut.rfind(". "), cut.rfind("\n"))
    if boundary > 0:
        cut = cut[: boundary + 1]
    return cut.rstrip() + "\n"


class HeuristicTransform:
    """Tactic-template rewrites for compensation and substitution."""

    def render_compensation(
        self,
        span_text: str,
        req: CapabilityRequirement,
        decision: TransformDecision,
        evidence: str,
        policy: Policy,
    ) -> str:
        text = span_text
        sentences: list[str] = []

        def say(sentence: str) -> None:
            # guidance already in the span (a prior round) is not repeated
            if sentence not in span_text:
                sentences.append(sentence)

        for tactic in decision.tactics:
            if tactic == "inject_absolute_paths":
                text = rewrite_relative_paths(text)
                say(
                    "Resolve every file path against the skill package directory: "
                    "the runtime exports $SKILL_DIR with its absolute path, so use "
                    "$SKILL_DIR/<relative-path> instead of a bare relative path."
                )
            elif tactic == "make_steps_explicit":
                say(
                    "Perform the steps above one at a time, in the exact order "
                    "given, finishing each before starting the next; do not skip "
                    "or reorder steps."
                )
            elif tactic == "add_format_constraint":
                say(
                    "Match the output format above exactly; emit nothing outside "
                    "the required structure."
                )
            elif tactic == "add_worked_example":
                family = req.capability.split(".", 1)[0]
                say(_WORKED_EXAMPLES.get(family, _WORKED_EXAMPLES["follow"]))

        limit = policy.max_insert_tokens * 4
        if evidence.strip():
            prefix = "Known failure mode from earlier runs: "
            overhead = len(GUIDANCE_MARK) + len(req.capability) + 8
            used = overhead + sum(len(s) + 1 for s in sentences) + len(prefix)
            room = min(policy.max_evidence_tokens * 4, limit - used)
            condensed = " ".join(evidence.split())
            if room > 40:
                if len(condensed) > room:
                    condensed = condensed[:room].rsplit(" ", 1)[0] + " ..."
                sentences.append(prefix + condensed)

        if not sentences:
            return text
        sep = "" if text.endswith("\n") else "\n"
        guidance = f"{sep}\n{GUIDANCE_MARK} ({req.capability}): " + " ".join(sentences) + "\n"
        return text + _cap_insert(guidance, policy.max_insert_tokens)

    def render_substitution(self, span_text: str, req, path, policy: Policy) -> str:
        instructions = path.instructions
        if not instructions.strip():
            raise TransformBackendFailure(
                f"equivalence path {path.description!r} has no instructions"
            )
        if span_text.endswith("\n") and not instructions.endswith("\n"):
            instructions += "\n"
        return instructions


# ---------------------------------------------------------------------------
# Inference-backed implementations (best-effort; fall back to heuristics)
# ---------------------------------------------------------------------------

def _ask_json(backend: InferenceBackend, prompt: str) -> object:
    response = backend.complete(
        InferenceRequest(
            system="Respond with a single JSON value and nothing else.",
            messages=(Message(role="user", content=prompt),),
        )
    )
    text = response.text.strip()
    if text.startswith("```"):
        text = re.sub(r"^```\w*\n|```$", "", text).strip()
    return json.loads(text)


class InferenceAnalysis(HeuristicAnalysis):
    """Delegates open-vocabulary judgment to a model; heuristic on failure."""

    def __init__(self, catalog: CapabilityCatalog, backend: InferenceBackend):
        super().__init__(catalog)
        self.backend = backend

    def extract_requirements(self, skill: SkillPackage) -> RequirementSet:
        baseline = super().extract_requirements(skill)
        prompt = (
            "Given this agent skill body, list the primitive capabilities it "
            "demands as JSON [{\"capability\": id, \"level\": 1-3, \"start\": n, "
            f"\"end\": n}}]. Known ids: {', '.join(self.catalog.ids())}.\n\n{skill.body}"
        )
        try:
            raw = _ask_json(self.backend, prompt)
            reqs = tuple(
                CapabilityRequirement(
                    capability=str(r["capability"]),
                    level=int(r["level"]),
                    source_span=(
                        max(0, int(r.get("start", 0))),
                        min(len(skill.body), int(r.get("end", 0))),
                    ),
                )
                for r in raw
                if str(r.get("capability", "")) in self.catalog
            )
            if not reqs:
                return baseline
            return RequirementSet(reqs, baseline.equivalence_classes)
        except Exception as exc:
            logger.warning("inference requirement extraction failed (%s); using heuristic", exc)
            return baseline

    def decompose_steps(self, skill: SkillPackage) -> list[WorkflowStep]:
        baseline = super().decompose_steps(skill)
        prompt = (
            "Decompose this skill into workflow steps as JSON [{\"id\": str, "
            "\"description\": str, \"consumes\": [names], \"produces\": [names], "
            "\"items\": n, \"multi_turn\": bool}].\n\n" + skill.body
        )
        try:
            raw = _ask_json(self.backend, prompt)
            steps = [
                WorkflowStep(
                    id=str(s.get("id") or f"s{n}"),
                    description=str(s.get("description", "")),
                    consumes=frozenset(map(str, s.get("consumes", []))),
                    produces=frozenset(map(str, s.get("produces", []))),
                    internal_items=int(s.get("items", 0)),
                    multi_turn=bool(s.get("multi_turn", False)),
                )
                for n, s in enumerate(raw, start=1)
            ]
            return steps or baseline
        except Exception as exc:
            logger.warning("inference step decomposition failed (%s); using heuristic", exc)
            return baseline


class InferenceTransform(HeuristicTransform):
    """Model-written compensation text, constrained to stay span-local."""

    def __init__(self, backend: InferenceBackend):
        self.backend = backend

    def render_compensation(self, span_text, req, decision, evidence, policy):
        fallback = super().render_compensation(span_text, req, decision, evidence, policy)
        prompt = (
            f"Rewrite this skill fragment so a model with only level "
            f"{req.level - decision.gap} of {req.capability} can follow it. "
            f"Apply: {', '.join(decision.tactics)}. Keep the original intent. "
            f"Return only the rewritten fragment.\n\n{span_text}"
        )
        try:
            response = self.backend.complete(
                InferenceRequest(system="", messages=(Message(role="user", content=prompt),))
            )
            text = response.text
            if not text.strip():
                return fallback
            if GUIDANCE_MARK not in text:
                sep = "" if text.endswith("\n") else "\n"
                text += f"{sep}\n{GUIDANCE_MARK} ({req.capability}): rewritten for a lower proficiency level.\n"
            return _cap_insert(text, policy.max_insert_tokens + len(span_text) // 4)
        except Exception as exc:
            logger.warning("inference compensation failed (%s); using heuristic", exc)
            return fallback
