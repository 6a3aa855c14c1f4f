"""Primitive-capability catalog: the shared vocabulary of what skills demand.

The catalog maps dotted capability ids (e.g. ``gen.code.shell``) to ordered
proficiency levels, each with a one-line behavioral definition and references
to the microbenchmarks that measure it. The bundled default catalog ships 26
primitives across four categories with three levels each.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import yaml

from .errors import DuplicateCapability, NonContiguousLevels, UnknownCapability, UnknownCategory

CATEGORIES = ("generation", "reasoning", "tool", "following")


@dataclass(frozen=True)
class LevelSpec:
    """One proficiency level of a capability.

    Levels are strictly ordered: ability at level n never covers a level n+1
    demand, and each definition extends the one below it. Profiling records a
    monotonicity flag when measurements contradict this ordering.
    """

    level: int
    definition: str
    benchmarks: tuple[str, ...]


@dataclass(frozen=True)
class PrimitiveCapability:
    id: str
    category: str
    levels: tuple[LevelSpec, ...]

    @property
    def max_level(self) -> int:
        return len(self.levels)

    def level(self, n: int) -> LevelSpec:
        for spec in self.levels:
            if spec.level == n:
                return spec
        raise UnknownCapability(f"{self.id} has no level {n}")


@dataclass(frozen=True)
class CapabilityCatalog:
    version: str
    primitives: tuple[PrimitiveCapability, ...]

    def __contains__(self, cap_id: str) -> bool:
        return any(p.id == cap_id for p in self.primitives)

    def get(self, cap_id: str) -> PrimitiveCapability:
        for p in self.primitives:
            if p.id == cap_id:
                return p
        raise UnknownCapability(f"capability {cap_id!r} is not in the catalog")

    def ids(self) -> tuple[str, ...]:
        return tuple(p.id for p in self.primitives)

    def by_category(self) -> dict[str, list[PrimitiveCapability]]:
        out: dict[str, list[PrimitiveCapability]] = {c: [] for c in CATEGORIES}
        for p in self.primitives:
            out[p.category].append(p)
        return out


def _parse_primitive(raw: dict) -> PrimitiveCapability:
    cap_id = str(raw.get("id", ""))
    category = str(raw.get("category", ""))
    if category not in CATEGORIES:
        raise UnknownCategory(f"{cap_id}: category {category!r} not one of {CATEGORIES}")

    levels = []
    for entry in raw.get("levels", []):
        levels.append(
            LevelSpec(
                level=int(entry["level"]),
                definition=str(entry["definition"]),
                benchmarks=tuple(str(b) for b in entry.get("benchmarks", [])),
            )
        )
    levels.sort(key=lambda s: s.level)
    expected = list(range(1, len(levels) + 1))
    if [s.level for s in levels] != expected:
        raise NonContiguousLevels(
            f"{cap_id}: levels {[s.level for s in levels]} are not contiguous from 1"
        )
    return PrimitiveCapability(id=cap_id, category=category, levels=tuple(levels))


def load_catalog(path: str | Path) -> CapabilityCatalog:
    """Load and validate a catalog data file."""
    raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    primitives = []
    seen = set()
    for entry in raw.get("primitives", []):
        cap = _parse_primitive(entry)
        if cap.id in seen:
            raise DuplicateCapability(f"capability {cap.id!r} listed more than once")
        seen.add(cap.id)
        primitives.append(cap)
    return CapabilityCatalog(version=str(raw.get("version", "0")), primitives=tuple(primitives))


def default_catalog_path() -> Path:
    return Path(str(resources.files("skillc").joinpath("data/catalog.yaml")))


def load_default_catalog() -> CapabilityCatalog:
    return load_catalog(default_catalog_path())
