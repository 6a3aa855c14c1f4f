"""Runtime configuration and tunable policy knobs.

Policy collects every numeric decision rule the compiler and runtime consult;
Config resolves operator-facing settings (store location, catalog, backend
selection) from an optional config file plus CLI flags. Credentials are only
ever read from environment variables.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import yaml

from .profiling import HarnessFeatures

STORE_ENV = "SKILLC_STORE"
CACHE_ENV = "SKILLC_CACHE_DIR"
DEFAULT_API_KEY_ENV = "SKILLC_API_KEY"


@dataclass(frozen=True)
class Policy:
    max_compensation_gap: int = 1     # larger gaps fall through to substitution
    max_insert_tokens: int = 120      # cap on compensation text per span (1 token ~ 4 chars)
    promotion_k: int = 3              # consecutive signature matches before promotion
    min_failures: int = 3             # systematic-gap detection
    min_distinct_tasks: int = 2
    eval_window: int = 5              # executions before a recompiled variant is judged
    dlp_fanout: int = 4
    turn_limit: int = 24
    exec_timeout: float = 30.0
    script_timeout: float = 60.0
    max_evidence_tokens: int = 500    # failure-log text forwarded to recompilation

    def with_overrides(self, overrides: dict) -> "Policy":
        known = {f.name for f in fields(self)}
        unknown = set(overrides) - known
        if unknown:
            raise ValueError(f"unknown policy keys: {sorted(unknown)}")
        return replace(self, **overrides)


def load_policy(path: str | Path | None, overrides: dict | None = None) -> Policy:
    policy = Policy()
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        policy = policy.with_overrides(raw)
    if overrides:
        policy = policy.with_overrides(overrides)
    return policy


BASE_TOOLSET = frozenset({"read", "write", "exec"})

HARNESS_PRESETS: dict[str, HarnessFeatures] = {
    "bare": HarnessFeatures(tools=BASE_TOOLSET),
    "batch": HarnessFeatures(tools=BASE_TOOLSET, batch_dispatch=True),
    "subagent": HarnessFeatures(tools=BASE_TOOLSET, subagent_spawn=True),
    "full": HarnessFeatures(tools=BASE_TOOLSET, batch_dispatch=True, subagent_spawn=True),
}


def harness_features(harness_id: str, extra: dict | None = None) -> HarnessFeatures:
    """Resolve a harness id to its feature set (presets, then config extras)."""
    if extra and harness_id in extra:
        spec = extra[harness_id]
        return HarnessFeatures(
            tools=frozenset(spec.get("tools", BASE_TOOLSET)) | BASE_TOOLSET,
            batch_dispatch=bool(spec.get("batch_dispatch", False)),
            subagent_spawn=bool(spec.get("subagent_spawn", False)),
            context_budget=int(spec.get("context_budget", 200_000)),
        )
    if harness_id in HARNESS_PRESETS:
        return HARNESS_PRESETS[harness_id]
    return HARNESS_PRESETS["bare"]


@dataclass
class Config:
    store_dir: Path
    catalog_path: Path | None = None     # None -> bundled default
    backend: str = "scripted"            # scripted | http
    endpoint: str = ""
    api_key_env: str = DEFAULT_API_KEY_ENV
    fixtures_path: Path | None = None    # scripted backend transcript file
    policy: Policy = field(default_factory=Policy)
    harnesses: dict = field(default_factory=dict)

    @property
    def cache_dir(self) -> Path:
        env = os.environ.get(CACHE_ENV)
        return Path(env) if env else self.store_dir / "profiles"

    def show(self) -> dict:
        return {
            "store_dir": str(self.store_dir),
            "catalog_path": str(self.catalog_path) if self.catalog_path else "(bundled)",
            "backend": self.backend,
            "endpoint": self.endpoint,
            "api_key_env": self.api_key_env,
            "fixtures_path": str(self.fixtures_path) if self.fixtures_path else "",
            "policy": {f.name: getattr(self.policy, f.name) for f in fields(Policy)},
        }


def load_config(path: str | Path | None = None, **flag_overrides) -> Config:
    """Resolve Config: file values first, CLI flags override the file."""
    raw: dict = {}
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}

    def pick(key: str, default):
        if flag_overrides.get(key) is not None:
            return flag_overrides[key]
        return raw.get(key, default)

    store_dir = Path(pick("store_dir", os.environ.get(STORE_ENV, "skillc-store")))
    catalog = pick("catalog_path", None)
    fixtures = pick("fixtures_path", None)
    policy = Policy().with_overrides(raw.get("policy", {}))
    if flag_overrides.get("policy_overrides"):
        policy = policy.with_overrides(flag_overrides["policy_overrides"])
    return Config(
        store_dir=store_dir,
        catalog_path=Path(catalog) if catalog else None,
        backend=str(pick("backend", "scripted")),
        endpoint=str(pick("endpoint", "")),
        api_key_env=str(pick("api_key_env", DEFAULT_API_KEY_ENV)),
        fixtures_path=Path(fixtures) if fixtures else None,
        policy=policy,
        harnesses=dict(raw.get("harnesses", {})),
    )
