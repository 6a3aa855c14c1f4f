from __future__ import annotations

import random
import string

import pytest
from hypothesis import given, settings, strategies as st

from skillc.analysis import heuristic_candidates
from skillc.errors import ParamExtractionFailure
from skillc.jit import (
    DEMOTED,
    OBSERVING,
    PROMOTED,
    CandidateState,
    CodeSignature,
    JitCandidate,
    ParamSlot,
    demote,
    extract_params,
    fill_template,
    instantiation_script,
    make_candidate,
    match_signature,
    normalize_code,
    observe,
)

WEATHER_CODE = 'curl "https://wttr.example/current?city=London&format=3"'


def weather_candidate() -> JitCandidate:
    cand = make_candidate("w.jit0", WEATHER_CODE, "shell", ("weather",))
    assert cand is not None
    return cand


# ---------------------------------------------------------------------------
# normalize_code
# ---------------------------------------------------------------------------

def test_comments_and_whitespace_ignored():
    a = normalize_code("ls   -la   # list files\n", "shell")
    b = normalize_code("ls -la\n", "shell")
    assert a == b


def test_city_values_unify():
    paris = normalize_code('curl "https://wttr.example/current?city=Paris&format=3"', "shell")
    tokyo = normalize_code('curl "https://wttr.example/current?city=Tokyo&format=3"', "shell")
    assert [t.kind for t in paris] == [t.kind for t in tokyo]
    assert [t.text for t in paris if t.kind == "lit"] == [t.text for t in tokyo if t.kind == "lit"]
    holes_p = [t.value for t in paris if t.kind == "hole"]
    holes_t = [t.value for t in tokyo if t.kind == "hole"]
    assert holes_p == ["Paris", "3"] and holes_t == ["Tokyo", "3"]


def test_path_segments_stay_literal():
    current = normalize_code('curl "https://api.example/current?city=X"', "shell")
    forecast = normalize_code('curl "https://api.example/forecast?city=X"', "shell")
    current_lits = [t.text for t in current if t.kind == "lit"]
    forecast_lits = [t.text for t in forecast if t.kind == "lit"]
    assert "current" in current_lits and "forecast" in forecast_lits
    assert current_lits != forecast_lits


def test_empty_text_empty_sequence():
    assert normalize_code("", "shell") == ()


def test_unknown_language_generic():
    tokens = normalize_code("move 12 # not a comment", "mystery")
    assert any(t.kind == "lit" and t.text == "#" for t in tokens)  # comments kept


# ---------------------------------------------------------------------------
# candidate generation
# ---------------------------------------------------------------------------

def test_weather_candidate_slots():
    cand = weather_candidate()
    assert cand.slot_names() == ("city", "format")
    kinds = {s.name: s.kind for s in cand.param_schema}
    assert kinds == {"city": "string", "format": "number"}
    assert cand.template == 'curl "https://wttr.example/current?city={city}&format={format}"'


def test_zero_hole_candidate():
    cand = make_candidate("z.jit0", "make clean", "shell", ("build",))
    assert cand is not None
    assert cand.param_schema == ()
    assert match_signature(cand, "make clean").matched
    assert match_signature(cand, "make clean").params == {}


def test_no_code_no_candidates(tmp_path, catalog):
    from test_compiler import write_skill

    skill = write_skill(tmp_path, "Pure prose, nothing executable.\n")
    assert heuristic_candidates(skill) == []


def test_fixture_skill_candidates(weather_skill):
    cands = heuristic_candidates(weather_skill)
    assert len(cands) == 1
    assert cands[0].slot_names() == ("city", "format")
    assert "weather" in cands[0].keywords


def test_signature_derivable_from_template():
    cand = weather_candidate()
    assert cand.signature.tokens == normalize_code(cand.template, cand.language)


# ---------------------------------------------------------------------------
# match_signature
# ---------------------------------------------------------------------------

def test_fill_then_match_recovers_values():
    cand = weather_candidate()
    filled = fill_template(cand.template, {"city": "Paris", "format": "3"})
    result = match_signature(cand, filled)
    assert result.matched
    assert result.params == {"city": "Paris", "format": "3"}


def test_structural_divergence_mismatch():
    cand = weather_candidate()
    divergent = 'curl "https://wttr.example/forecast?city=Paris&days=3&format=3"'
    result = match_signature(cand, divergent)
    assert not result.matched
    assert result.divergence


def test_schema_violation_counts_as_mismatch():
    cand = weather_candidate()
    bad = fill_template(cand.template, {"city": "Paris", "format": "xl"})
    result = match_signature(cand, bad)
    assert not result.matched
    assert "format" in result.divergence or "number" in result.divergence


def test_enum_slot_validation():
    cand = JitCandidate(
        id="e.jit0",
        keywords=("report",),
        template="sh run.sh mode={mode}",
        language="shell",
        param_schema=(ParamSlot("mode", "enum", ("fast", "full")),),
        signature=CodeSignature(normalize_code("sh run.sh mode={mode}", "shell"), "shell"),
    )
    assert match_signature(cand, "sh run.sh mode=fast").matched
    assert not match_signature(cand, "sh run.sh mode=slow").matched


SAFE = string.ascii_letters + string.digits + "_%."


@settings(max_examples=100, deadline=None)
@given(
    city=st.text(alphabet=SAFE, min_size=1, max_size=12).filter(lambda s: s[0].isalpha()),
    fmt=st.integers(min_value=0, max_value=9999),
)
def test_round_trip_property(city, fmt):
    cand = weather_candidate()
    assignment = {"city": city, "format": str(fmt)}
    result = match_signature(cand, fill_template(cand.template, assignment))
    assert result.matched and result.params == assignment


def test_hole_adjacent_mutations_never_match():
    cand = weather_candidate()
    rng = random.Random(7)
    for _ in range(50):
        city = "".join(rng.choices(string.ascii_letters, k=6))
        filled = fill_template(cand.template, {"city": city, "format": "3"})
        mutated = filled.replace("city=", "town=")
        assert not match_signature(cand, mutated).matched
        mutated2 = filled.replace("format=", "fmt=")
        assert not match_signature(cand, mutated2).matched


# ---------------------------------------------------------------------------
# promotion state machine
# ---------------------------------------------------------------------------

def test_promotion_at_k():
    state = CandidateState(consecutive=2)
    assert observe(state, True, k=3).status == PROMOTED


def test_counter_resets_on_mismatch():
    state = CandidateState()
    state = observe(state, True, k=3)
    state = observe(state, False, k=3)
    state = observe(state, True, k=3)
    assert state.status == OBSERVING
    assert state.consecutive == 1


def test_eight_mismatches_never_promote():
    state = CandidateState()
    for _ in range(8):
        state = observe(state, False, k=3)
    assert state.status == OBSERVING
    assert state.consecutive == 0


def test_demoted_is_terminal():
    state = demote(CandidateState(status=PROMOTED))
    assert state.status == DEMOTED
    assert observe(state, True, k=3).status == DEMOTED


def test_promotion_gate_soundness_on_random_logs():
    rng = random.Random(11)
    for _ in range(100):
        outcomes = [rng.random() < 0.6 for _ in range(rng.randint(1, 12))]
        state = CandidateState()
        for matched in outcomes:
            state = observe(state, matched, k=3)
        if state.status == PROMOTED:
            # replay: the last K observed outcomes up to promotion were matches
            run = 0
            promoted_at = None
            for i, matched in enumerate(outcomes):
                run = run + 1 if matched else 0
                if run >= 3:
                    promoted_at = i
                    break
            assert promoted_at is not None
            assert all(outcomes[promoted_at - 2: promoted_at + 1])


# ---------------------------------------------------------------------------
# parameter extraction and instantiation
# ---------------------------------------------------------------------------

def test_extract_params_from_context_then_defaults():
    cand = weather_candidate()
    params = extract_params(cand, {"city": "Oslo"}, {"format": "3"})
    assert params == {"city": "Oslo", "format": "3"}


def test_extract_params_missing_slot():
    cand = weather_candidate()
    with pytest.raises(ParamExtractionFailure):
        extract_params(cand, {"city": "Oslo"}, {})


def test_extract_params_kind_check():
    cand = weather_candidate()
    with pytest.raises(ParamExtractionFailure):
        extract_params(cand, {"city": "Oslo", "format": "huge"}, {})


def test_instantiation_script_is_executable_shell(tmp_path):
    cand = weather_candidate()
    script = instantiation_script(cand, {"city": "Oslo", "format": "3"})
    assert script.startswith("#!/bin/sh")
    assert 'city=Oslo' in script
