"""Code solidification: turn recurring generated-code patterns into scripts.

Candidates are mined from a compiled skill's code fences at compile time:
parameter-looking literals are abstracted into named template slots and the
whole fence is normalized into a code signature (token sequence with typed
holes). At run time the monitor matches generated code against the signature;
after enough consecutive matches the candidate is promoted and later
invocations execute the filled template directly instead of calling the
model. Any execution or task failure demotes the candidate back to the model
path for the rest of the session.

Normalization works at sub-literal granularity: string contents are split on
URL/query delimiters, and only '='-preceded values and bare numbers become
holes. Path segments and command words stay literal, so structurally
different code (e.g. a different API route) never unifies with a signature.
Slot values must therefore not contain the structural delimiters themselves.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

from .errors import ParamExtractionFailure, SchemaViolation

_STRING_DELIMS = "/?&=:,;+ "
_SLOT_RE = re.compile(r"\{([A-Za-z_]\w*)\}")
_NUMBER_RE = re.compile(r"^-?\d+(\.\d+)?$")
_WORD_RE = re.compile(r"[A-Za-z_][\w.\-]*")

_SHELL_LANGS = {"shell", "sh", "bash", "zsh", ""}
_LINE_COMMENT = {"shell": "#", "sh": "#", "bash": "#", "zsh": "#", "python": "#", "py": "#",
                 "yaml": "#", "javascript": "//", "js": "//", "sql": "--"}


@dataclass(frozen=True)
class SigToken:
    kind: str            # lit | hole
    text: str = ""       # literal text
    hole_kind: str = ""  # string | number  (holes only)
    name: str = ""       # template slot name; "" for abstracted literals
    value: str = ""      # captured source value (concrete code only)
    span: tuple[int, int] = (0, 0)

    def render(self) -> str:
        if self.kind == "lit":
            return self.text
        label = self.name or "_"
        return f"<{label}:{self.hole_kind}>"


@dataclass(frozen=True)
class ParamSlot:
    name: str
    kind: str                      # string | number | enum
    values: tuple[str, ...] = ()   # enum members

    def accepts(self, value: str) -> bool:
        if self.kind == "number":
            return _NUMBER_RE.match(value) is not None
        if self.kind == "enum":
            return value in self.values
        return True


@dataclass(frozen=True)
class CodeSignature:
    tokens: tuple[SigToken, ...]
    language: str

    def render(self) -> str:
        return " ".join(t.render() for t in self.tokens)


@dataclass(frozen=True)
class JitCandidate:
    id: str
    keywords: tuple[str, ...]
    template: str
    language: str
    param_schema: tuple[ParamSlot, ...]
    signature: CodeSignature

    def slot_names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.param_schema)

    def matches_context(self, text: str) -> bool:
        lowered = text.lower()
        return any(k.lower() in lowered for k in self.keywords)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "keywords": list(self.keywords),
            "language": self.language,
            "template": self.template,
            "param_schema": [
                {"name": s.name, "kind": s.kind, **({"values": list(s.values)} if s.values else {})}
                for s in self.param_schema
            ],
            "signature": self.signature.render(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "JitCandidate":
        schema = tuple(
            ParamSlot(str(s["name"]), str(s["kind"]), tuple(s.get("values", [])))
            for s in data.get("param_schema", [])
        )
        template = str(data["template"])
        language = str(data.get("language", "shell"))
        return cls(
            id=str(data["id"]),
            keywords=tuple(str(k) for k in data.get("keywords", [])),
            template=template,
            language=language,
            param_schema=schema,
            signature=CodeSignature(normalize_code(template, language), language),
        )


# ---------------------------------------------------------------------------
# Tokenizer / normalizer
# ---------------------------------------------------------------------------

def _strip_comments(text: str, language: str) -> str:
    marker = _LINE_COMMENT.get(language)
    if marker is None:
        return text  # unknown tag: generic tokenizer, comments kept
    out_lines = []
    for line in text.splitlines():
        result = []
        quote: str | None = None
        i = 0
        while i < len(line):
            ch = line[i]
            if quote:
                result.append(ch)
                if ch == quote:
                    quote = None
                i += 1
                continue
            if ch in "\"'":
                quote = ch
                result.append(ch)
                i += 1
                continue
            if line.startswith(marker, i):
                break
            if language in ("javascript", "js") and line.startswith("/*", i):
                close = line.find("*/", i + 2)
                if close == -1:
                    break
                i = close + 2
                continue
            result.append(ch)
            i += 1
        out_lines.append("".join(result))
    return "\n".join(out_lines)


def _sub_lex_string(content: str, base: int) -> list[SigToken]:
    """Lex a string literal's content with '='-value and number abstraction."""
    tokens: list[SigToken] = []
    run = []
    run_start = 0

    def flush(end: int) -> None:
        if not run:
            return
        word = "".join(run)
        start = base + run_start
        slot = _SLOT_RE.fullmatch(word)
        prev_eq = bool(tokens) and tokens[-1].kind == "lit" and tokens[-1].text == "="
        if slot:
            tokens.append(SigToken("hole", hole_kind="string", name=slot.group(1), span=(start, end + base)))
        elif _NUMBER_RE.match(word):
            tokens.append(SigToken("hole", hole_kind="number", value=word, span=(start, end + base)))
        elif prev_eq:
            tokens.append(SigToken("hole", hole_kind="string", value=word, span=(start, end + base)))
        else:
            tokens.append(SigToken("lit", text=word, span=(start, end + base)))
        run.clear()

    for i, ch in enumerate(content):
        if ch in _STRING_DELIMS:
            flush(i)
            if ch != " ":
                tokens.append(SigToken("lit", text=ch, span=(base + i, base + i + 1)))
            run_start = i + 1
        else:
            if not run:
                run_start = i
            run.append(ch)
    flush(len(content))
    return tokens


def lex_code(text: str, language: str = "shell") -> list[SigToken]:
    """Lex code into literal tokens and typed holes, recording source spans."""
    stripped = _strip_comments(text, language)
    tokens: list[SigToken] = []
    i = 0
    n = len(stripped)
    while i < n:
        ch = stripped[i]
        if ch.isspace():
            i += 1
            continue
        slot = _SLOT_RE.match(stripped, i)
        if slot:
            tokens.append(SigToken("hole", hole_kind="string", name=slot.group(1), span=(i, slot.end())))
            i = slot.end()
            continue
        if ch in "\"'":
            close = stripped.find(ch, i + 1)
            if close == -1:
                close = n
            tokens.append(SigToken("lit", text='"', span=(i, i + 1)))
            tokens.extend(_sub_lex_string(stripped[i + 1:close], i + 1))
            tokens.append(SigToken("lit", text='"', span=(close, min(close + 1, n))))
            i = close + 1
            continue
        number = re.match(r"-?\d+(\.\d+)?", stripped[i:])
        if number and (ch.isdigit() or (ch == "-" and i + 1 < n and stripped[i + 1].isdigit())):
            end = i + number.end()
            tokens.append(SigToken("hole", hole_kind="number", value=stripped[i:end], span=(i, end)))
            i = end
            continue
        word = _WORD_RE.match(stripped, i)
        if word:
            prev_eq = bool(tokens) and tokens[-1].kind == "lit" and tokens[-1].text == "="
            if prev_eq:
                tokens.append(SigToken("hole", hole_kind="string", value=word.group(0), span=(i, word.end())))
            else:
                tokens.append(SigToken("lit", text=word.group(0), span=(i, word.end())))
            i = word.end()
            continue
        tokens.append(SigToken("lit", text=ch, span=(i, i + 1)))
        i += 1

    return tokens


def normalize_code(text: str, language: str = "shell") -> tuple[SigToken, ...]:
    """Deterministic normal form: comments gone, whitespace collapsed,
    literals abstracted to typed holes. Source spans are dropped so the
    normal form is position-independent."""
    return tuple(replace(t, span=(0, 0)) for t in lex_code(text, language))


# ---------------------------------------------------------------------------
# Candidate generation
# ---------------------------------------------------------------------------

def _slot_name_for(tokens: list[SigToken], index: int, used: set[str]) -> str:
    token = tokens[index]
    name = ""
    if index >= 2 and tokens[index - 1].kind == "lit" and tokens[index - 1].text == "=":
        key = tokens[index - 2]
        if key.kind == "lit" and re.match(r"^[A-Za-z_]", key.text):
            name = re.sub(r"\W", "_", key.text).strip("_").lower()
    if not name:
        name = "num" if token.hole_kind == "number" else "arg"
    base = name
    n = 1
    while name in used:
        n += 1
        name = f"{base}{n}"
    used.add(name)
    return name


def _looks_solidifiable(inner: str, language: str) -> bool:
    if re.search(r"https?://", inner):
        return True
    if language in _SHELL_LANGS:
        for line in inner.splitlines():
            word = line.strip().split(" ")[0] if line.strip() else ""
            if re.match(r"^[a-zA-Z][\w.\-]*$", word):
                return True
    return False


def make_candidate(
    candidate_id: str,
    inner_code: str,
    language: str,
    keywords: tuple[str, ...],
) -> JitCandidate | None:
    """Abstract a code fence into a template + signature candidate."""
    if not inner_code.strip() or not _looks_solidifiable(inner_code, language):
        return None

    tokens = lex_code(inner_code, language)
    used: set[str] = set()
    slots: list[ParamSlot] = []
    replacements: list[tuple[int, int, str]] = []
    for idx, token in enumerate(tokens):
        if token.kind == "hole" and not token.name:
            name = _slot_name_for(tokens, idx, used)
            slots.append(ParamSlot(name, token.hole_kind))
            replacements.append((token.span[0], token.span[1], "{%s}" % name))

    template = inner_code
    for start, end, slot_text in sorted(replacements, reverse=True):
        template = template[:start] + slot_text + template[end:]

    return JitCandidate(
        id=candidate_id,
        keywords=keywords,
        template=template,
        language=language,
        param_schema=tuple(slots),
        signature=CodeSignature(normalize_code(template, language), language),
    )


def fill_template(template: str, values: dict[str, object]) -> str:
    def sub(match: re.Match) -> str:
        name = match.group(1)
        return str(values[name]) if name in values else match.group(0)

    return _SLOT_RE.sub(sub, template)


# ---------------------------------------------------------------------------
# Signature matching
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MatchResult:
    matched: bool
    params: dict[str, str] = field(default_factory=dict)
    divergence: str = ""  # first diverging token, for diagnostics

    def __bool__(self) -> bool:
        return self.matched


def match_signature(candidate: JitCandidate, generated_code: str) -> MatchResult:
    """Match generated code against the candidate signature.

    Match iff the normalized token sequences align, with holes binding the
    generated literals. Bound values are validated against the param schema;
    a structural match with an invalid value counts as a mismatch.
    """
    sig = candidate.signature.tokens
    gen = normalize_code(generated_code, candidate.language)
    schema = {s.name: s for s in candidate.param_schema}
    params: dict[str, str] = {}

    for index in range(max(len(sig), len(gen))):
        if index >= len(sig):
            return MatchResult(False, divergence=f"extra token {gen[index].render()!r} at {index}")
        if index >= len(gen):
            return MatchResult(False, divergence=f"generated code ends before {sig[index].render()!r}")
        expected, got = sig[index], gen[index]

        if expected.kind == "lit":
            if got.kind != "lit" or got.text != expected.text:
                return MatchResult(False, divergence=f"expected {expected.text!r}, got {got.render()!r} at {index}")
            continue

        value = got.value if got.kind == "hole" else got.text
        if got.kind == "lit" and not _WORD_RE.fullmatch(got.text):
            return MatchResult(False, divergence=f"expected a value, got {got.text!r} at {index}")
        if expected.hole_kind == "number" and not _NUMBER_RE.match(value):
            return MatchResult(False, divergence=f"expected a number, got {value!r} at {index}")
        if expected.name:
            slot = schema.get(expected.name)
            if slot is not None and not slot.accepts(value):
                # SchemaViolation: structure matched but the value fails its kind
                return MatchResult(False, divergence=str(SchemaViolation(
                    f"slot {expected.name!r} rejects {value!r} ({slot.kind})")))
            params[expected.name] = value

    return MatchResult(True, params=params)


# ---------------------------------------------------------------------------
# Promotion state machine
# ---------------------------------------------------------------------------

OBSERVING = "observing"
PROMOTED = "promoted"
DEMOTED = "demoted"


@dataclass(frozen=True)
class CandidateState:
    status: str = OBSERVING
    consecutive: int = 0
    bypasses: int = 0
    failures: int = 0
    last_bound: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "consecutive": self.consecutive,
            "bypasses": self.bypasses,
            "failures": self.failures,
            "last_bound": dict(sorted(self.last_bound.items())),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CandidateState":
        return cls(
            status=str(data.get("status", OBSERVING)),
            consecutive=int(data.get("consecutive", 0)),
            bypasses=int(data.get("bypasses", 0)),
            failures=int(data.get("failures", 0)),
            last_bound=dict(data.get("last_bound", {})),
        )


def observe(state: CandidateState, matched: bool, k: int = 3) -> CandidateState:
    """Advance the Observing counter on a signature-match outcome.

    A match increments the consecutive counter and promotes at k; a mismatch
    resets the counter to zero. Demoted is terminal for the session.
    """
    if state.status == DEMOTED:
        return state
    if state.status == PROMOTED:
        return state
    if not matched:
        return replace(state, consecutive=0)
    consecutive = state.consecutive + 1
    if consecutive >= k:
        return replace(state, status=PROMOTED, consecutive=consecutive)
    return replace(state, consecutive=consecutive)


def demote(state: CandidateState) -> CandidateState:
    return replace(state, status=DEMOTED, failures=state.failures + 1)


def extract_params(
    candidate: JitCandidate,
    context_params: dict[str, object],
    last_bound: dict[str, str] | None = None,
) -> dict[str, str]:
    """Resolve every template slot from task params, then last-bound defaults."""
    resolved: dict[str, str] = {}
    defaults = last_bound or {}
    for slot in candidate.param_schema:
        if slot.name in context_params:
            value = str(context_params[slot.name])
        elif slot.name in defaults:
            value = str(defaults[slot.name])
        else:
            raise ParamExtractionFailure(f"no value for slot {slot.name!r} of {candidate.id}")
        if not slot.accepts(value):
            raise ParamExtractionFailure(
                f"value {value!r} for slot {slot.name!r} fails its {slot.kind} kind"
            )
        resolved[slot.name] = value
    return resolved


def instantiation_script(candidate: JitCandidate, params: dict[str, str]) -> str:
    """Wrap the filled template into a standalone executable script."""
    filled = fill_template(candidate.template, params)
    if candidate.language in ("python", "py"):
        return filled
    header = "#!/bin/sh\n# solidified from candidate %s\n" % candidate.id
    return header + filled + ("\n" if not filled.endswith("\n") else "")
