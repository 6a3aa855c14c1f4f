"""Environment binding: manifest extraction, host probing, repair scripts.

Reconciles a compiled skill's environment assumptions with the host: extracts
a dependency manifest (packages, CLI tools, services), probes the host for
each entry, and emits an idempotent POSIX shell script that checks and, where
a repair path is known, repairs each dependency before the skill runs. The
script exits 0 iff every entry ends satisfied and writes all diagnostics to
stdout so a failed run can be handed to the model as context.

Repairs that go through a system package or service manager are gated behind
--yes (or ASSUME_YES=1); language-level installs (pip, npm) always run.
"""

from __future__ import annotations

import hashlib
import re
import shutil
import subprocess
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol

from .errors import ScriptTimeout
from .skills import SkillPackage

# Commands assumed present on any host we target; never extracted as deps.
ASSUMED_PRESENT = frozenset({
    "cd", "echo", "printf", "export", "set", "unset", "source", "alias", "exit",
    "return", "if", "then", "else", "elif", "fi", "for", "while", "until", "do",
    "done", "case", "esac", "test", "true", "false", "read", "shift", "local",
    "eval", "exec", "trap", "wait", "ls", "cat", "cp", "mv", "rm", "mkdir",
    "rmdir", "touch", "grep", "egrep", "sed", "awk", "find", "head", "tail",
    "wc", "sort", "uniq", "tr", "cut", "chmod", "chown", "tar", "gzip", "date",
    "env", "which", "command", "dirname", "basename", "sleep", "xargs", "tee",
    "pwd", "ln", "kill", "ps", "sh", "bash", "python", "python3", "pip", "pip3",
    "npm", "node", "apt", "apt-get", "sudo",
})

_INSTALL_RE = re.compile(
    r"\b(pip3?|npm|apt-get|apt)\s+install\s+((?:-\S+\s+)*)([\w.@/=<>,\[\]-]+(?:\s+[\w.@/=<>,\[\]-]+)*)"
)
_SHELL_LANGS = {"shell", "sh", "bash", "zsh"}
_VERSION_SPLIT_RE = re.compile(r"(==|>=|<=|>|<|~=)")


@dataclass(frozen=True)
class DependencyEntry:
    kind: str  # package | cli_tool | service
    name: str
    ecosystem: str = ""  # pip | npm | apt (packages only)
    version_constraint: str = ""
    origin: str = ""  # "span:<start>-<end>" or "declared_prerequisite"

    @property
    def dedup_key(self) -> tuple[str, str]:
        return (self.kind, self.name)

    def describe(self) -> str:
        if self.kind == "package":
            return f"{self.ecosystem} package {self.name}"
        return f"{self.kind.replace('_', ' ')} {self.name}"


@dataclass(frozen=True)
class DependencyManifest:
    entries: tuple[DependencyEntry, ...]
    skill_id: str
    source_hash: str

    def manifest_hash(self) -> str:
        h = hashlib.sha256()
        for e in self.entries:
            h.update(f"{e.kind}|{e.ecosystem}|{e.name}|{e.version_constraint}\n".encode())
        return h.hexdigest()


@dataclass(frozen=True)
class ProbeResult:
    entry: DependencyEntry
    status: str  # satisfied | missing | broken
    detail: str = ""
    repair_command: str = ""
    needs_confirmation: bool = False  # repair goes through a system manager


@dataclass(frozen=True)
class BindingScript:
    text: str
    manifest_hash: str
    generated_at: float


@dataclass(frozen=True)
class BindingOutcome:
    status: str  # ok | failed
    stdout: str

    @property
    def ok(self) -> bool:
        return self.status == "ok"


# ---------------------------------------------------------------------------
# Heuristic manifest extraction
# ---------------------------------------------------------------------------

def _ecosystem_of(manager: str) -> str:
    if manager.startswith("pip"):
        return "pip"
    if manager in ("apt", "apt-get"):
        return "apt"
    return manager


def _split_constraint(token: str) -> tuple[str, str]:
    m = _VERSION_SPLIT_RE.search(token)
    if m:
        return token[: m.start()], token[m.start():]
    return token, ""


def _install_mentions(text: str, origin: str) -> list[DependencyEntry]:
    entries = []
    for m in _INSTALL_RE.finditer(text):
        ecosystem = _ecosystem_of(m.group(1))
        for token in m.group(3).split():
            if token.startswith("-"):
                continue
            name, constraint = _split_constraint(token)
            if name:
                entries.append(DependencyEntry("package", name, ecosystem, constraint, origin))
    return entries


def _command_words(fence_code: str) -> list[str]:
    words = []
    for line in fence_code.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        for segment in re.split(r"&&|\|\||[|;]", line):
            parts = segment.strip().split()
            if not parts:
                continue
            word = parts[0]
            if word == "sudo" and len(parts) > 1:
                word = parts[1]
            if re.match(r"^[A-Za-z][\w.+-]*$", word):
                words.append(word)
    return words


def _prerequisite_entry(text: str) -> DependencyEntry:
    cleaned = text.strip()
    tagged = re.match(r"^(pip|npm|apt|service|tool):\s*(\S+)$", cleaned)
    if tagged:
        tag, name = tagged.group(1), tagged.group(2)
        if tag == "service":
            return DependencyEntry("service", name, origin="declared_prerequisite")
        if tag == "tool":
            return DependencyEntry("cli_tool", name, origin="declared_prerequisite")
        name, constraint = _split_constraint(name)
        return DependencyEntry("package", name, tag, constraint, "declared_prerequisite")
    installs = _install_mentions(cleaned, "declared_prerequisite")
    if installs:
        return installs[0]
    token = cleaned.split()[0] if cleaned.split() else cleaned
    return DependencyEntry("cli_tool", token.lower(), origin="declared_prerequisite")


def heuristic_dependencies(skill: SkillPackage) -> list[DependencyEntry]:
    """Rule-based dependency extraction: install-command mentions anywhere,
    non-baseline binaries invoked in shell fences, declared prerequisites."""
    entries: list[DependencyEntry] = []
    entries.extend(_install_mentions(skill.body, "span:0-%d" % len(skill.body)))

    for block in skill.blocks:
        if block.kind != "code":
            continue
        origin = f"span:{block.span[0]}-{block.span[1]}"
        if block.lang.lower() in _SHELL_LANGS:
            for word in _command_words(block.text):
                if word.lower() in ASSUMED_PRESENT:
                    continue
                entries.append(DependencyEntry("cli_tool", word, origin=origin))

    for prereq in skill.metadata.declared_prerequisites:
        if prereq.strip():
            entries.append(_prerequisite_entry(prereq))
    return entries


def extract_manifest(skill: SkillPackage, analysis) -> DependencyManifest:
    """Build the deduplicated dependency manifest via the analysis backend."""
    entries = analysis.extract_dependencies(skill)
    deduped: dict[tuple[str, str], DependencyEntry] = {}
    for entry in entries:
        deduped.setdefault(entry.dedup_key, entry)
    ordered = tuple(sorted(deduped.values(), key=lambda e: (e.kind, e.ecosystem, e.name)))
    return DependencyManifest(entries=ordered, skill_id=skill.id, source_hash=skill.content_hash())


# ---------------------------------------------------------------------------
# Host probing
# ---------------------------------------------------------------------------

class HostProber(Protocol):
    def has_package(self, ecosystem: str, name: str) -> bool: ...
    def has_tool(self, name: str) -> bool: ...
    def has_service(self, name: str) -> bool: ...
    def platform(self) -> dict: ...


class RealHostProber:
    """Probes the actual host; used for smoke tests and production only."""

    def has_package(self, ecosystem: str, name: str) -> bool:
        probes = {
            "pip": ["pip", "show", name],
            "npm": ["npm", "ls", "-g", name],
            "apt": ["dpkg", "-s", name],
        }
        cmd = probes.get(ecosystem)
        if cmd is None or shutil.which(cmd[0]) is None:
            return False
        try:
            return subprocess.run(cmd, capture_output=True, timeout=30).returncode == 0
        except (OSError, subprocess.TimeoutExpired):
            return False

    def has_tool(self, name: str) -> bool:
        return shutil.which(name) is not None

    def has_service(self, name: str) -> bool:
        if shutil.which("service") is None:
            return False
        try:
            return subprocess.run(
                ["service", name, "status"], capture_output=True, timeout=15
            ).returncode == 0
        except (OSError, subprocess.TimeoutExpired):
            return False

    def platform(self) -> dict:
        managers = [m for m in ("pip", "npm", "apt-get") if shutil.which(m)]
        return {
            "package_managers": managers,
            "service_manager": "service" if shutil.which("service") else "",
        }


class FakeHost:
    """Declarative host fixture: installed sets plus an action log.

    materialize() writes the state to a directory of PATH shims (which, pip,
    npm, dpkg, apt-get, service) so the emitted binding script runs under
    /bin/sh against this host for real; mutations land in the state file and
    the action log. sync() reads mutations back into the Python-side view.
    """

    def __init__(
        self,
        packages: dict[str, set[str]] | None = None,
        tools: set[str] | None = None,
        services: set[str] | None = None,
        package_managers: tuple[str, ...] = ("pip", "npm", "apt-get"),
        service_manager: str = "service",
    ):
        self.packages = {eco: set(names) for eco, names in (packages or {}).items()}
        self.tools = set(tools or ())
        self.services = set(services or ())
        self.package_managers = package_managers
        self.service_manager = service_manager
        self.action_log: list[str] = []
        self._dir: Path | None = None

    # prober interface ------------------------------------------------------
    def has_package(self, ecosystem: str, name: str) -> bool:
        return name in self.packages.get(ecosystem, set())

    def has_tool(self, name: str) -> bool:
        return name in self.tools

    def has_service(self, name: str) -> bool:
        return name in self.services

    def platform(self) -> dict:
        return {
            "package_managers": list(self.package_managers),
            "service_manager": self.service_manager,
        }

    # state snapshot for idempotence assertions -----------------------------
    def snapshot(self) -> tuple:
        return (
            {eco: frozenset(names) for eco, names in sorted(self.packages.items())},
            frozenset(self.tools),
            frozenset(self.services),
        )

    # shim materialization ---------------------------------------------------
    def _state_lines(self) -> list[str]:
        lines = []
        for eco, names in sorted(self.packages.items()):
            lines += [f"{eco}:{n}" for n in sorted(names)]
        lines += [f"tool:{n}" for n in sorted(self.tools)]
        lines += [f"service:{n}" for n in sorted(self.services)]
        return lines

    def materialize(self, directory: str | Path) -> dict[str, str]:
        base = Path(directory)
        base.mkdir(parents=True, exist_ok=True)
        state = base / "state"
        actions = base / "actions"
        state.write_text("\n".join(self._state_lines()) + "\n", encoding="utf-8")
        actions.write_text("", encoding="utf-8")

        shims = {
            "which": (
                'grep -qx "tool:$1" "$FAKEHOST_STATE" && { echo "/fake/bin/$1"; exit 0; }\n'
                "exit 1\n"
            ),
            "pip": (
                'case "$1" in\n'
                '  show) grep -qx "pip:$2" "$FAKEHOST_STATE"; exit $? ;;\n'
                '  install) shift; for p in "$@"; do\n'
                '      name=${p%%[=<>~]*}\n'
                '      echo "pip install $p" >> "$FAKEHOST_ACTIONS";\n'
                '      echo "pip:$name" >> "$FAKEHOST_STATE"; done; exit 0 ;;\n'
                "esac\nexit 1\n"
            ),
            "npm": (
                'case "$1" in\n'
                '  ls) grep -qx "npm:$3" "$FAKEHOST_STATE"; exit $? ;;\n'
                '  install) echo "npm install $3" >> "$FAKEHOST_ACTIONS";\n'
                '           echo "npm:$3" >> "$FAKEHOST_STATE"; exit 0 ;;\n'
                "esac\nexit 1\n"
            ),
            "dpkg": (
                '[ "$1" = "-s" ] && { grep -qx "apt:$2" "$FAKEHOST_STATE"; exit $?; }\nexit 1\n'
            ),
            "apt-get": (
                'if [ "$1" = "install" ]; then shift;\n'
                '  for p in "$@"; do [ "$p" = "-y" ] && continue;\n'
                '    echo "apt-get install $p" >> "$FAKEHOST_ACTIONS";\n'
                '    echo "apt:$p" >> "$FAKEHOST_STATE";\n'
                '    echo "tool:$p" >> "$FAKEHOST_STATE"; done; exit 0\nfi\nexit 1\n'
            ),
            "service": (
                'case "$2" in\n'
                '  status) grep -qx "service-running:$1" "$FAKEHOST_STATE"; exit $? ;;\n'
                '  start) echo "service $1 start" >> "$FAKEHOST_ACTIONS";\n'
                '         echo "service-running:$1" >> "$FAKEHOST_STATE"; exit 0 ;;\n'
                "esac\nexit 1\n"
            ),
        }
        for name, body in shims.items():
            shim = base / name
            shim.write_text("#!/bin/sh\n" + body, encoding="utf-8")
            shim.chmod(0o755)

        self._dir = base
        # running services are tracked separately from configured ones
        with state.open("a", encoding="utf-8") as fh:
            for svc in sorted(self.services):
                fh.write(f"service-running:{svc}\n")
        import os

        return {
            "PATH": f"{base}:{os.environ.get('PATH', '')}",
            "FAKEHOST_STATE": str(state),
            "FAKEHOST_ACTIONS": str(actions),
        }

    def sync(self) -> None:
        """Read script-made mutations back into the Python-side view."""
        if self._dir is None:
            return
        self.packages = {}
        self.tools = set()
        self.services = set()
        for line in (self._dir / "state").read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            kind, _, name = line.partition(":")
            if kind == "tool":
                self.tools.add(name)
            elif kind == "service-running" or kind == "service":
                self.services.add(name)
            else:
                self.packages.setdefault(kind, set()).add(name)
        self.action_log = [
            line
            for line in (self._dir / "actions").read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]


# ---------------------------------------------------------------------------
# Probing and script emission
# ---------------------------------------------------------------------------

def _repair_for(entry: DependencyEntry, platform: dict) -> tuple[str, bool]:
    """Return (repair command, needs system-manager confirmation)."""
    managers = set(platform.get("package_managers", []))
    if entry.kind == "package":
        if entry.ecosystem == "pip" and "pip" in managers:
            return f"pip install {entry.name}{entry.version_constraint}", False
        if entry.ecosystem == "npm" and "npm" in managers:
            return f"npm install -g {entry.name}", False
        if entry.ecosystem == "apt" and "apt-get" in managers:
            return f"apt-get install -y {entry.name}", True
        return "", False
    if entry.kind == "cli_tool":
        if "apt-get" in managers:
            return f"apt-get install -y {entry.name}", True
        return "", False
    if entry.kind == "service":
        if platform.get("service_manager"):
            return f"service {entry.name} start", True
        return "", False
    return "", False


def presence_check(entry: DependencyEntry, prober: HostProber) -> ProbeResult:
    """Lightweight presence check, then system-aware repair derivation."""
    try:
        if entry.kind == "package":
            present = prober.has_package(entry.ecosystem, entry.name)
        elif entry.kind == "cli_tool":
            present = prober.has_tool(entry.name)
        else:
            present = prober.has_service(entry.name)
        platform = prober.platform()
    except Exception as exc:  # ProberUnavailable: missing with no repair
        return ProbeResult(entry, "missing", detail=f"prober unavailable: {exc}")

    if present:
        return ProbeResult(entry, "satisfied")
    repair, confirm = _repair_for(entry, platform)
    return ProbeResult(entry, "missing", repair_command=repair, needs_confirmation=confirm)


def _check_command(entry: DependencyEntry) -> str:
    if entry.kind == "package":
        return {
            "pip": f"pip show {entry.name} >/dev/null 2>&1",
            "npm": f"npm ls -g {entry.name} >/dev/null 2>&1",
            "apt": f"dpkg -s {entry.name} >/dev/null 2>&1",
        }.get(entry.ecosystem, "false")
    if entry.kind == "cli_tool":
        return f"which {entry.name} >/dev/null 2>&1"
    return f"service {entry.name} status >/dev/null 2>&1"


def emit_binding_script(
    manifest: DependencyManifest,
    probe_results: list[ProbeResult],
    clock: Callable[[], float] = time.time,
) -> BindingScript:
    """Emit the check -> repair -> re-check script; one guarded section per entry."""
    by_key = {r.entry.dedup_key: r for r in probe_results}
    lines = [
        "#!/bin/sh",
        f"# env binding for skill {manifest.skill_id} (manifest {manifest.manifest_hash()[:12]})",
        "# idempotent: every repair is guarded by its own presence check",
        'ASSUME_YES="${ASSUME_YES:-0}"',
        '[ "$1" = "--yes" ] && ASSUME_YES=1',
        "failures=0",
        "",
    ]
    for entry in manifest.entries:
        probe = by_key.get(entry.dedup_key, ProbeResult(entry, "missing"))
        check = _check_command(entry)
        label = entry.describe()
        lines.append(f"# -- {label}")
        lines.append(f"if {check}; then")
        lines.append(f'  echo "ok: {label} present"')
        if probe.repair_command:
            repair = f"{probe.repair_command} 2>&1"
            recheck = [
                f"  if {check}; then",
                f'    echo "repaired: {label}"',
                "  else",
                f'    echo "failed: {label} still missing after repair"',
                "    failures=$((failures+1))",
                "  fi",
            ]
            if probe.needs_confirmation:
                lines.append("else")
                lines.append('  if [ "$ASSUME_YES" = "1" ]; then')
                lines.append(f'    echo "missing: {label}; repairing"')
                lines.append(f"    {repair}")
                lines.extend(["  " + l for l in recheck])
                lines.append("  else")
                lines.append(
                    f'    echo "failed: {label} missing; suggested repair: '
                    f'{probe.repair_command} (re-run with --yes)"'
                )
                lines.append("    failures=$((failures+1))")
                lines.append("  fi")
            else:
                lines.append("else")
                lines.append(f'  echo "missing: {label}; repairing"')
                lines.append(f"  {repair}")
                lines.extend(recheck)
        else:
            lines.append("else")
            lines.append(f'  echo "failed: {label} missing and no repair path was found"')
            lines.append("  failures=$((failures+1))")
        lines.append("fi")
        lines.append("")

    lines.append('[ "$failures" -eq 0 ] || { echo "env binding failed: $failures unsatisfied"; exit 1; }')
    lines.append('echo "env binding ok"')
    lines.append("exit 0")
    return BindingScript(
        text="\n".join(lines) + "\n",
        manifest_hash=manifest.manifest_hash(),
        generated_at=clock(),
    )


def execute_binding(
    script: BindingScript | str | Path,
    env: dict[str, str] | None = None,
    cwd: str | Path | None = None,
    timeout: float = 60.0,
    assume_yes: bool = False,
    lock_path: str | Path | None = None,
) -> BindingOutcome:
    """Run a binding script under /bin/sh; failure carries the full stdout."""
    if isinstance(script, BindingScript):
        text = script.text
    elif isinstance(script, Path) or (isinstance(script, str) and "\n" not in script):
        text = Path(script).read_text(encoding="utf-8")
    else:
        text = str(script)

    import os

    run_env = dict(os.environ)
    if env:
        run_env.update(env)
    if assume_yes:
        run_env["ASSUME_YES"] = "1"
    else:
        run_env.pop("ASSUME_YES", None)

    def run() -> BindingOutcome:
        try:
            proc = subprocess.run(
                ["sh", "-s"],
                input=text,
                capture_output=True,
                text=True,
                env=run_env,
                cwd=cwd,
                timeout=timeout,
            )
        except subprocess.TimeoutExpired as exc:
            cause = ScriptTimeout(f"binding script exceeded {timeout}s")
            partial = exc.stdout if isinstance(exc.stdout, str) else ""
            return BindingOutcome("failed", partial + f"\n{cause}")
        output = proc.stdout + (("\n" + proc.stderr) if proc.stderr.strip() else "")
        return BindingOutcome("ok" if proc.returncode == 0 else "failed", output)

    if lock_path is not None:
        from filelock import FileLock

        with FileLock(str(lock_path) + ".lock"):
            return run()
    return run()
