"""Skill package model: parsing, validation, and lossless serialization.

A skill package is a directory with a SKILL.md file (frontmatter + body) and
arbitrary bundled resource files. The body is segmented into typed blocks
(prose, numbered steps, fenced code) such that concatenating the blocks
reproduces the body bytes exactly; serialize(parse(dir)) round-trips the
SKILL.md content byte-identically.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from pathlib import Path

from .errors import MalformedFrontmatter, MissingMetadata, ResourceEscape

SKILL_FILE = "SKILL.md"

_SLUG_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")
_STEP_RE = re.compile(r"^\s{0,3}(\d+)[.)]\s+")
_FENCE_RE = re.compile(r"^\s{0,3}```")

_SCRIPT_EXTS = {".py", ".sh", ".bash", ".js", ".ts", ".rb", ".pl"}
_TEMPLATE_EXTS = {".tmpl", ".tpl", ".j2"}


@dataclass(frozen=True)
class Block:
    """One segment of the skill body.

    kind is "prose", "steps", or "code"; span is the (start, end) byte range
    in the body; text == body[start:end]. Code blocks carry the fence's
    language tag (may be empty).
    """

    kind: str
    text: str
    span: tuple[int, int]
    lang: str = ""


@dataclass(frozen=True)
class BundledResource:
    path: str  # posix-style, relative to the package root
    data: bytes
    kind: str  # script | reference | template


@dataclass(frozen=True)
class SkillMetadata:
    name: str
    description: str
    triggers: tuple[str, ...] = ()
    declared_prerequisites: tuple[str, ...] = ()


@dataclass(frozen=True)
class SkillPackage:
    id: str
    metadata: SkillMetadata
    body: str
    blocks: tuple[Block, ...]
    resources: tuple[BundledResource, ...] = ()
    frontmatter_text: str = ""  # raw frontmatter incl. both --- fences

    def serialize(self) -> str:
        return self.frontmatter_text + self.body

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.serialize().encode("utf-8"))
        for res in sorted(self.resources, key=lambda r: r.path):
            h.update(res.path.encode("utf-8"))
            h.update(b"\0")
            h.update(res.data)
        return h.hexdigest()

    def resource(self, path: str) -> BundledResource | None:
        for res in self.resources:
            if res.path == path:
                return res
        return None


def segment_blocks(body: str) -> tuple[Block, ...]:
    """Segment the body into prose / steps / code blocks.

    Total: the concatenation of block texts equals the body. Fenced code
    runs from a ``` line to the next line that is only ```, or to EOF if
    unterminated. A steps block is a run of numbered items plus their
    continuation lines; a blank line ends it unless the next line is
    another numbered item.
    """
    lines = body.splitlines(keepends=True)
    blocks: list[Block] = []
    offset = 0
    i = 0

    def flush(kind: str, chunk: list[str], lang: str = "") -> None:
        nonlocal offset
        if not chunk:
            return
        text = "".join(chunk)
        blocks.append(Block(kind, text, (offset, offset + len(text)), lang))
        offset += len(text)

    while i < len(lines):
        line = lines[i]
        if _FENCE_RE.match(line):
            lang = line.strip().lstrip("`").strip()
            chunk = [line]
            i += 1
            while i < len(lines):
                chunk.append(lines[i])
                if lines[i].strip() == "```":
                    i += 1
                    break
                i += 1
            flush("code", chunk, lang)
        elif _STEP_RE.match(line):
            chunk = [line]
            i += 1
            while i < len(lines):
                cur = lines[i]
                if _STEP_RE.match(cur):
                    chunk.append(cur)
                    i += 1
                elif not cur.strip():
                    # blank stays inside only when another item follows
                    if i + 1 < len(lines) and _STEP_RE.match(lines[i + 1]):
                        chunk.append(cur)
                        i += 1
                    else:
                        break
                elif _FENCE_RE.match(cur):
                    break
                else:
                    chunk.append(cur)  # continuation line of the last item
                    i += 1
            flush("steps", chunk)
        else:
            chunk = [line]
            i += 1
            while i < len(lines) and not _FENCE_RE.match(lines[i]) and not _STEP_RE.match(lines[i]):
                chunk.append(lines[i])
                i += 1
            flush("prose", chunk)

    return tuple(blocks)


def step_items(block: Block) -> list[tuple[int, str]]:
    """Return (number, item text) pairs for a steps block.

    Item text includes continuation lines, with the numbering marker removed.
    """
    items: list[tuple[int, str]] = []
    for line in block.text.splitlines():
        m = _STEP_RE.match(line)
        if m:
            items.append((int(m.group(1)), line[m.end():]))
        elif items and line.strip():
            num, text = items[-1]
            items[-1] = (num, text + "\n" + line.strip())
    return items


def _parse_list_value(value: str) -> tuple[str, ...]:
    inner = value.strip()[1:-1]
    return tuple(p.strip().strip("'\"") for p in inner.split(",") if p.strip())


def parse_frontmatter(text: str) -> tuple[dict, str, str]:
    """Split a SKILL.md file into (fields, raw frontmatter text, body).

    The frontmatter is a ``---`` fenced block of ``key: value`` lines at the
    head of the file. Values may be scalars, inline lists (``[a, b]``), or
    block lists (``- item`` lines under the key).
    """
    lines = text.splitlines(keepends=True)
    if not lines or lines[0].strip() != "---":
        raise MalformedFrontmatter("file does not start with a --- frontmatter fence")

    end = None
    for idx in range(1, len(lines)):
        if lines[idx].strip() == "---":
            end = idx
            break
    if end is None:
        raise MalformedFrontmatter("frontmatter fence is never closed")

    fields: dict[str, object] = {}
    pending_key: str | None = None
    for raw in lines[1:end]:
        line = raw.rstrip("\n")
        if not line.strip() or line.strip().startswith("#"):
            continue
        if line.lstrip().startswith("- "):
            if pending_key is None:
                raise MalformedFrontmatter(f"list item outside any key: {line.strip()!r}")
            fields[pending_key] = tuple(fields.get(pending_key, ())) + (
                line.lstrip()[2:].strip().strip("'\""),
            )
            continue
        if ":" not in line:
            raise MalformedFrontmatter(f"expected 'key: value', got {line.strip()!r}")
        key, _, value = line.partition(":")
        key = key.strip()
        value = value.strip()
        if not value:
            fields[key] = ()
            pending_key = key
        elif value.startswith("[") and value.endswith("]"):
            fields[key] = _parse_list_value(value)
            pending_key = None
        else:
            fields[key] = value.strip("'\"")
            pending_key = None

    frontmatter_text = "".join(lines[: end + 1])
    body = "".join(lines[end + 1:])
    return fields, frontmatter_text, body


def _classify_resource(rel: Path) -> str:
    if rel.suffix.lower() in _SCRIPT_EXTS or (rel.parts and rel.parts[0] == "scripts"):
        return "script"
    if rel.suffix.lower() in _TEMPLATE_EXTS or any("template" in part.lower() for part in rel.parts):
        return "template"
    return "reference"


def _discover_resources(root: Path) -> tuple[BundledResource, ...]:
    resolved_root = root.resolve()
    resources = []
    for path in sorted(root.rglob("*")):
        if not path.is_file() or path.name == SKILL_FILE:
            continue
        # symlinks pointing outside the package root are rejected
        if resolved_root not in path.resolve().parents and path.resolve() != resolved_root:
            raise ResourceEscape(f"resource {path} resolves outside the package root")
        rel = path.relative_to(root)
        resources.append(BundledResource(rel.as_posix(), path.read_bytes(), _classify_resource(rel)))
    return tuple(resources)


def parse_skill_text(text: str, skill_id: str) -> SkillPackage:
    """Parse SKILL.md content (no resources). Used for compiled variants too."""
    if not skill_id or not _SLUG_RE.match(skill_id):
        raise MissingMetadata(f"skill id {skill_id!r} is empty or not filesystem-safe")

    fields, frontmatter_text, body = parse_frontmatter(text)
    name = str(fields.get("name", "") or "")
    description = str(fields.get("description", "") or "")
    if not name:
        raise MissingMetadata("frontmatter is missing 'name'")
    if not description:
        raise MissingMetadata("frontmatter is missing 'description'")

    def as_tuple(value: object) -> tuple[str, ...]:
        if isinstance(value, tuple):
            return value
        return (str(value),) if value else ()

    metadata = SkillMetadata(
        name=name,
        description=description,
        triggers=as_tuple(fields.get("triggers", ())),
        declared_prerequisites=as_tuple(fields.get("prerequisites", ())),
    )
    return SkillPackage(
        id=skill_id,
        metadata=metadata,
        body=body,
        blocks=segment_blocks(body),
        frontmatter_text=frontmatter_text,
    )


def parse_skill_package(root_path: str | Path) -> SkillPackage:
    """Parse a skill package directory into a validated SkillPackage."""
    root = Path(root_path)
    skill_file = root / SKILL_FILE
    if not skill_file.is_file():
        raise MissingMetadata(f"{root} has no {SKILL_FILE}")

    package = parse_skill_text(skill_file.read_text(encoding="utf-8"), root.name)
    resources = _discover_resources(root)
    return SkillPackage(
        id=package.id,
        metadata=package.metadata,
        body=package.body,
        blocks=package.blocks,
        resources=resources,
        frontmatter_text=package.frontmatter_text,
    )
