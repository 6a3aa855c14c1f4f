from __future__ import annotations

from pathlib import Path

import pytest

from skillc.analysis import HeuristicAnalysis, HeuristicTransform
from skillc.backends import Fixture, ScriptedBackend
from skillc.catalog import CapabilityCatalog, load_default_catalog
from skillc.compiler import Toolchain
from skillc.config import harness_features
from skillc.envbind import FakeHost
from skillc.profiling import CapabilityProfile, TargetDescriptor
from skillc.skills import parse_skill_package

FIXTURES = Path(__file__).parent / "fixtures"

FROZEN_CLOCK = lambda: 0.0  # noqa: E731


@pytest.fixture(scope="session")
def catalog() -> CapabilityCatalog:
    return load_default_catalog()


@pytest.fixture()
def pptx_skill():
    return parse_skill_package(FIXTURES / "pptx_skill")


@pytest.fixture()
def incident_skill():
    return parse_skill_package(FIXTURES / "incident_skill")


@pytest.fixture()
def scan_skill():
    return parse_skill_package(FIXTURES / "scan_skill")


@pytest.fixture()
def weather_skill():
    return parse_skill_package(FIXTURES / "weather_skill")


def make_target(model: str = "m1", harness: str = "bare") -> TargetDescriptor:
    return TargetDescriptor(model, harness, harness_features(harness))


def make_profile(
    catalog: CapabilityCatalog,
    target: TargetDescriptor,
    default: int = 3,
    overrides: dict[str, int] | None = None,
) -> CapabilityProfile:
    attained = {cap.id: default for cap in catalog.primitives}
    attained.update(overrides or {})
    return CapabilityProfile(
        target=target,
        attained=attained,
        inconsistencies=[],
        profiled_at=0.0,
        catalog_version=catalog.version,
    )


def make_toolchain(
    catalog: CapabilityCatalog,
    profile: CapabilityProfile,
    prober: FakeHost | None = None,
) -> Toolchain:
    return Toolchain(
        catalog=catalog,
        analysis=HeuristicAnalysis(catalog),
        transform=HeuristicTransform(),
        prober=prober or FakeHost(),
        profile=profile,
    )


def scripted(turn_map: dict[str, list[dict]], repeat: set[str] = frozenset()) -> ScriptedBackend:
    """Build a scripted backend from {key: turns}; keys in `repeat` cycle."""
    return ScriptedBackend(
        [Fixture(key=k, turns=v, repeat=k in repeat) for k, v in turn_map.items()]
    )


def exec_turn(command: str, content: str = "") -> dict:
    return {"content": content, "tool_calls": [{"name": "exec", "arguments": {"command": command}}]}


def text_turn(content: str) -> dict:
    return {"content": content}


def pytest_runtest_logreport(report):
    # one visible pass/fail line per acceptance criterion
    if report.when == "call" and "test_acceptance" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        outcome = "PASS" if report.passed else "FAIL"
        print(f"\n[acceptance] {outcome} {name}")
