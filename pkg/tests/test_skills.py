from __future__ import annotations

import os
from pathlib import Path

import pytest
from hypothesis import given, strategies as st

from skillc.errors import MalformedFrontmatter, MissingMetadata, ResourceEscape
from skillc.skills import (
    parse_skill_package,
    parse_skill_text,
    segment_blocks,
    step_items,
)

MINIMAL = """---
name: pdf
description: PDF ops
---

Extract tables from PDF files with pdfplumber.
"""


def write_skill(root: Path, text: str) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    (root / "SKILL.md").write_text(text, encoding="utf-8")
    return root


def test_minimal_package(tmp_path):
    pkg = parse_skill_package(write_skill(tmp_path / "pdf", MINIMAL))
    assert pkg.id == "pdf"
    assert pkg.metadata.name == "pdf"
    assert pkg.metadata.description == "PDF ops"
    assert len(pkg.resources) == 0
    assert [b.kind for b in pkg.blocks] == ["prose"]


def test_missing_description_raises(tmp_path):
    text = "---\nname: pdf\n---\nbody\n"
    with pytest.raises(MissingMetadata):
        parse_skill_package(write_skill(tmp_path / "pdf", text))


def test_script_resource_discovered(tmp_path):
    root = write_skill(tmp_path / "pdf", MINIMAL)
    (root / "scripts").mkdir()
    (root / "scripts" / "fill.py").write_text("print('x')\n")
    pkg = parse_skill_package(root)
    assert len(pkg.resources) == 1
    assert pkg.resources[0].path == "scripts/fill.py"
    assert pkg.resources[0].kind == "script"


def test_resource_kinds(tmp_path):
    root = write_skill(tmp_path / "kinds", MINIMAL)
    (root / "notes.md").write_text("reference text")
    (root / "report_template.html").write_text("<html></html>")
    pkg = parse_skill_package(root)
    kinds = {r.path: r.kind for r in pkg.resources}
    assert kinds["notes.md"] == "reference"
    assert kinds["report_template.html"] == "template"


def test_symlink_escape_rejected(tmp_path):
    root = write_skill(tmp_path / "pdf", MINIMAL)
    outside = tmp_path / "secret.txt"
    outside.write_text("secret")
    os.symlink(outside, root / "link.txt")
    with pytest.raises(ResourceEscape):
        parse_skill_package(root)


def test_malformed_frontmatter(tmp_path):
    for text in ("name: pdf\n", "---\nname: pdf\ndescription: x\n"):
        with pytest.raises(MalformedFrontmatter):
            parse_skill_package(write_skill(tmp_path / "bad", text))


def test_round_trip_byte_identical(pptx_skill, incident_skill, weather_skill):
    for pkg, name in [(pptx_skill, "pptx_skill"), (incident_skill, "incident_skill"),
                      (weather_skill, "weather_skill")]:
        source = (Path(__file__).parent / "fixtures" / name / "SKILL.md").read_text(encoding="utf-8")
        assert pkg.serialize() == source


def test_blocks_cover_body(pptx_skill):
    joined = "".join(b.text for b in pptx_skill.blocks)
    assert joined == pptx_skill.body
    kinds = [b.kind for b in pptx_skill.blocks]
    assert "steps" in kinds and "code" in kinds


def test_code_block_lang_tag(pptx_skill):
    fence = next(b for b in pptx_skill.blocks if b.kind == "code")
    assert fence.lang == "bash"
    assert fence.text.startswith("```bash")
    assert fence.text.rstrip("\n").endswith("```")


def test_step_items_with_continuations(incident_skill):
    steps = next(b for b in incident_skill.blocks if b.kind == "steps")
    items = step_items(steps)
    assert len(items) == 5
    assert items[0][0] == 1
    assert "output: logs.json" in items[0][1]


def test_block_spans_index_body(incident_skill):
    for block in incident_skill.blocks:
        start, end = block.span
        assert incident_skill.body[start:end] == block.text


@given(
    st.lists(
        st.sampled_from(
            [
                "plain prose line",
                "",
                "1. first step",
                "2. second step",
                "   continuation of a step",
                "```bash",
                "echo hi",
                "```",
                "## heading",
                "12) numbered with paren",
            ]
        ),
        max_size=30,
    )
)
def test_segmentation_total(lines):
    body = "\n".join(lines)
    blocks = segment_blocks(body)
    assert "".join(b.text for b in blocks) == body


def test_unterminated_fence_runs_to_eof():
    body = "intro\n```python\nx = 1\n"
    blocks = segment_blocks(body)
    assert "".join(b.text for b in blocks) == body
    assert blocks[-1].kind == "code"


def test_parse_skill_text_round_trip():
    pkg = parse_skill_text(MINIMAL, "pdf")
    assert pkg.serialize() == MINIMAL


def test_block_list_triggers(tmp_path):
    text = "---\nname: t\ndescription: d\ntriggers:\n  - alpha\n  - beta\n---\nbody\n"
    pkg = parse_skill_package(write_skill(tmp_path / "t", text))
    assert pkg.metadata.triggers == ("alpha", "beta")


def test_content_hash_covers_resources(tmp_path):
    root = write_skill(tmp_path / "h", MINIMAL)
    pkg1 = parse_skill_package(root)
    (root / "extra.txt").write_text("x")
    pkg2 = parse_skill_package(root)
    assert pkg1.content_hash() != pkg2.content_hash()
