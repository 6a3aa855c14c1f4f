"""Exception hierarchy shared across the toolkit.

Every domain error the CLI maps to exit code 1 derives from SkillcError and
carries a stable machine-parsable ``code`` (``E_*``) used as the error-line
prefix in CLI output.
"""

from __future__ import annotations


class SkillcError(Exception):
    """Base class for all domain errors."""

    code = "E_ERROR"

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def __str__(self) -> str:
        return f"{self.code}: {self.message}"


# -- skill packages ---------------------------------------------------------

class MissingMetadata(SkillcError):
    code = "E_MISSING_METADATA"


class MalformedFrontmatter(SkillcError):
    code = "E_MALFORMED_FRONTMATTER"


class ResourceEscape(SkillcError):
    code = "E_RESOURCE_ESCAPE"


# -- capability catalog -----------------------------------------------------

class DuplicateCapability(SkillcError):
    code = "E_DUPLICATE_CAPABILITY"


class NonContiguousLevels(SkillcError):
    code = "E_NONCONTIGUOUS_LEVELS"


class UnknownCategory(SkillcError):
    code = "E_UNKNOWN_CATEGORY"


class UnknownCapability(SkillcError):
    code = "E_UNKNOWN_CAPABILITY"


# -- profiling --------------------------------------------------------------

class BackendUnavailable(SkillcError):
    code = "E_BACKEND_UNAVAILABLE"


class RateLimited(SkillcError):
    code = "E_RATE_LIMITED"

    def __init__(self, message: str, retry_after: float | None = None):
        super().__init__(message)
        self.retry_after = retry_after


class FixtureExhausted(SkillcError):
    code = "E_FIXTURE_EXHAUSTED"


class SandboxSetupFailure(SkillcError):
    code = "E_SANDBOX_SETUP"


class IncompleteBenchmarkSuite(SkillcError):
    code = "E_INCOMPLETE_BENCHMARKS"


# -- compilation ------------------------------------------------------------

class CompileFailure(SkillcError):
    code = "E_COMPILE_FAILURE"

    def __init__(self, message: str, pass_name: str = ""):
        super().__init__(message)
        self.pass_name = pass_name


class TransformBackendFailure(SkillcError):
    code = "E_TRANSFORM_BACKEND"


class CyclicWorkflow(SkillcError):
    code = "E_CYCLIC_WORKFLOW"


class BindingGap(SkillcError):
    code = "E_BINDING_GAP"


# -- environment binding ----------------------------------------------------

class ProberUnavailable(SkillcError):
    code = "E_PROBER_UNAVAILABLE"


class ScriptTimeout(SkillcError):
    code = "E_SCRIPT_TIMEOUT"


# -- tools ------------------------------------------------------------------

class PathEscape(SkillcError):
    code = "E_PATH_ESCAPE"


class ExecTimeout(SkillcError):
    code = "E_EXEC_TIMEOUT"


class UnknownTool(SkillcError):
    code = "E_UNKNOWN_TOOL"


# -- JIT --------------------------------------------------------------------

class SchemaViolation(SkillcError):
    code = "E_SCHEMA_VIOLATION"


class ParamExtractionFailure(SkillcError):
    code = "E_PARAM_EXTRACTION"


class ExecutionFailure(SkillcError):
    code = "E_EXECUTION_FAILURE"


# -- runtime ----------------------------------------------------------------

class SkillNotFound(SkillcError):
    code = "E_SKILL_NOT_FOUND"


class TurnLimitExceeded(SkillcError):
    code = "E_TURN_LIMIT"
