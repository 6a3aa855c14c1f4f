"""Content-addressed artifact store.

Layout under the store root:

    registry.json                        registered skills and their variants
    <skill-id>/<model>__<harness>/       one directory per compiled variant
        manifest.json                    variant id, decisions, pass timings
        SKILL.md                         compiled skill text
        annotations.json                 parallel-structure annotations
        env-bind.sh                      environment binding script
        jit-candidates.json              solidification candidates
        jit-state.json                   runtime candidate state
        history.json                     variant score history
    events.log                           append-only execution event log
    hints.json                           scheduler concurrency hints

Variant writes are serialized per (skill, target) key and land via atomic
rename, so concurrent compiles degrade to last-writer-wins.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from filelock import FileLock

from .compiler import SkillVariant
from .concurrency import ExecutionAnnotation, annotations_from_payload, annotations_payload
from .errors import SkillNotFound
from .jit import CandidateState, JitCandidate
from .profiling import TargetDescriptor

PASSTHROUGH = "passthrough"


def _atomic_write(path: Path, data: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(data, encoding="utf-8")
    tmp.replace(path)


def _dump(payload: object) -> str:
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


@dataclass
class LoadedVariant:
    directory: Path
    manifest: dict
    compiled_text: str
    annotations: list[ExecutionAnnotation]
    candidates: list[JitCandidate]
    script_text: str

    @property
    def variant_id(self) -> str:
        return str(self.manifest.get("variant_id", ""))

    @property
    def transform_log(self) -> list[dict]:
        return list(self.manifest.get("transform_log", []))


class Store:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    # -- paths ---------------------------------------------------------------
    def variant_dir(self, skill_id: str, target: TargetDescriptor) -> Path:
        return self.root / skill_id / target.key

    @property
    def registry_path(self) -> Path:
        return self.root / "registry.json"

    @property
    def events_path(self) -> Path:
        return self.root / "events.log"

    @property
    def hints_path(self) -> Path:
        return self.root / "hints.json"

    @property
    def profiles_dir(self) -> Path:
        return self.root / "profiles"

    # -- variants ------------------------------------------------------------
    VARIANT_FILES = (
        "manifest.json", "SKILL.md", "annotations.json", "env-bind.sh", "jit-candidates.json",
    )

    def write_variant(self, variant: SkillVariant) -> Path:
        """Write the variant as the active one, archiving it under versions/."""
        directory = self.variant_dir(variant.skill_id, variant.target)
        directory.mkdir(parents=True, exist_ok=True)
        with FileLock(str(directory / ".write.lock")):
            manifest = {
                "variant_id": variant.variant_id,
                "skill_id": variant.skill_id,
                "source_hash": variant.source_hash,
                "model": variant.target.model_id,
                "harness": variant.target.harness_id,
                "decisions": [
                    {
                        "capability": e.requirement.capability,
                        "required": e.required,
                        "profiled": e.profiled,
                        "decision": e.decision.kind,
                        "tactics": list(e.decision.tactics),
                        "class_id": e.decision.class_id,
                        "warning": e.decision.warning,
                        "span": list(e.requirement.source_span),
                    }
                    for e in variant.gap_report.entries
                ],
                "transform_log": [e.to_dict() for e in variant.transform_log],
                "pass_timings": variant.pass_timings,
                "manifest_hash": variant.env_script.manifest_hash,
                "pass1_body": variant.pass1_body,
            }
            files = {
                "manifest.json": _dump(manifest),
                "SKILL.md": variant.compiled_text(),
                "annotations.json": _dump(annotations_payload(list(variant.annotations))),
                "env-bind.sh": variant.env_script.text,
                "jit-candidates.json": _dump([c.to_dict() for c in variant.jit_candidates]),
            }
            archive = directory / "versions" / variant.variant_id[:12]
            archive.mkdir(parents=True, exist_ok=True)
            for name, data in files.items():
                _atomic_write(archive / name, data)
                _atomic_write(directory / name, data)
        return directory

    def activate_variant(self, skill_id: str, target: TargetDescriptor, variant_id: str) -> None:
        """Copy an archived version's files back to the active top level."""
        directory = self.variant_dir(skill_id, target)
        archive = directory / "versions" / variant_id[:12]
        if not (archive / "manifest.json").is_file():
            raise SkillNotFound(f"variant {variant_id[:12]} of {skill_id} is not archived")
        with FileLock(str(directory / ".write.lock")):
            for name in self.VARIANT_FILES:
                _atomic_write(directory / name, (archive / name).read_text(encoding="utf-8"))

    def load_variant_version(
        self, skill_id: str, target: TargetDescriptor, variant_id: str
    ) -> LoadedVariant:
        archive = self.variant_dir(skill_id, target) / "versions" / variant_id[:12]
        return self.load_variant_dir(archive)

    def load_variant_dir(self, directory: str | Path) -> LoadedVariant:
        directory = Path(directory)
        manifest_path = directory / "manifest.json"
        if not manifest_path.is_file():
            raise SkillNotFound(f"{directory} holds no compiled variant")
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        annotations = annotations_from_payload(
            json.loads((directory / "annotations.json").read_text(encoding="utf-8"))
        )
        candidates = [
            JitCandidate.from_dict(c)
            for c in json.loads((directory / "jit-candidates.json").read_text(encoding="utf-8"))
        ]
        return LoadedVariant(
            directory=directory,
            manifest=manifest,
            compiled_text=(directory / "SKILL.md").read_text(encoding="utf-8"),
            annotations=annotations,
            candidates=candidates,
            script_text=(directory / "env-bind.sh").read_text(encoding="utf-8"),
        )

    def load_variant(self, skill_id: str, target: TargetDescriptor) -> LoadedVariant:
        return self.load_variant_dir(self.variant_dir(skill_id, target))

    def has_variant(self, skill_id: str, target: TargetDescriptor) -> bool:
        return (self.variant_dir(skill_id, target) / "manifest.json").is_file()

    # -- registry ------------------------------------------------------------
    def _read_registry(self) -> dict:
        if not self.registry_path.is_file():
            return {"skills": {}}
        return json.loads(self.registry_path.read_text(encoding="utf-8"))

    def register(
        self,
        skill_id: str,
        source_hash: str,
        package_root: str,
        target: TargetDescriptor,
        variant_id: str,
    ) -> None:
        with FileLock(str(self.registry_path) + ".lock"):
            registry = self._read_registry()
            entry = registry["skills"].setdefault(
                skill_id, {"source_hash": source_hash, "package_root": package_root, "variants": {}}
            )
            entry["source_hash"] = source_hash
            entry["package_root"] = package_root
            entry["variants"][target.key] = variant_id
            _atomic_write(self.registry_path, _dump(registry))

    def registered(self, skill_id: str) -> dict:
        entry = self._read_registry()["skills"].get(skill_id)
        if entry is None:
            raise SkillNotFound(f"skill {skill_id!r} is not registered")
        return entry

    def registry(self) -> dict:
        return self._read_registry()["skills"]

    # -- event log -----------------------------------------------------------
    def append_event(self, record: dict) -> None:
        line = json.dumps(record, sort_keys=True)
        with self.events_path.open("a", encoding="utf-8") as fh:
            fh.write(line + "\n")

    def read_events(self) -> list[dict]:
        if not self.events_path.is_file():
            return []
        return [
            json.loads(line)
            for line in self.events_path.read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]

    # -- JIT candidate state ---------------------------------------------------
    def _read_jit_file(self, directory: Path) -> dict[str, dict]:
        path = directory / "jit-state.json"
        if not path.is_file():
            return {}
        return json.loads(path.read_text(encoding="utf-8"))

    def load_jit_states(self, directory: Path, session: str = "") -> dict[str, CandidateState]:
        """Load candidate states for a session.

        Demotion is session-scoped: entries demoted by a different session are
        restarted at Observing(0), keeping their bypass/failure statistics.
        Pass session="" to read the raw persisted states (jit-status view).
        """
        states: dict[str, CandidateState] = {}
        for cid, payload in self._read_jit_file(directory).items():
            state = CandidateState.from_dict(payload)
            if session and state.status == "demoted" and payload.get("session") != session:
                state = CandidateState(
                    last_bound=state.last_bound, bypasses=state.bypasses, failures=state.failures
                )
            states[cid] = state
        return states

    def save_jit_states(
        self, directory: Path, states: dict[str, CandidateState], session: str
    ) -> None:
        existing = self._read_jit_file(directory)
        merged = dict(existing)
        for cid, state in states.items():
            prior = existing.get(cid)
            if (
                prior is not None
                and prior.get("status") == "demoted"
                and prior.get("session") == session
                and state.status != "demoted"
            ):
                merged[cid] = prior  # sticky-demoted across concurrent same-session writers
            else:
                merged[cid] = {**state.to_dict(), "session": session}
        directory.mkdir(parents=True, exist_ok=True)
        _atomic_write(
            directory / "jit-state.json", _dump(dict(sorted(merged.items())))
        )

    # -- variant history -------------------------------------------------------
    def load_history(self, skill_id: str, target: TargetDescriptor) -> dict:
        path = self.variant_dir(skill_id, target) / "history.json"
        if not path.is_file():
            return {"entries": [], "active": "", "best": ""}
        return json.loads(path.read_text(encoding="utf-8"))

    def save_history(self, skill_id: str, target: TargetDescriptor, history: dict) -> None:
        directory = self.variant_dir(skill_id, target)
        directory.mkdir(parents=True, exist_ok=True)
        _atomic_write(directory / "history.json", _dump(history))
