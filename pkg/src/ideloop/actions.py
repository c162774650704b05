"""Action vocabulary, validation, and canonical serialization.

Every turn the policy emits raw text; ``validate`` turns it into at most one
``Action`` plus a verdict listing every problem found. Validation never
raises: malformed model output is an expected input, not a fault.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Optional, Union

from ideloop.workspace import EDIT_OPS, NODE_KINDS

# field type tags: path, str, nonempty_str, nonneg_int, str_list, kind, edit
TOOLS: dict[str, dict[str, str]] = {
    "open_file": {"path": "path"},
    "edit": {"path": "path", "edit": "edit"},
    "create_node": {"path": "path", "kind": "kind"},
    "run_cell": {"notebook": "path", "cell_index": "nonneg_int"},
    "run_script": {"path": "path", "args": "str_list"},
    "poll": {"process_id": "str"},
    "interrupt": {"process_id": "str", "reason": "str"},
    "deep_think": {"question": "nonempty_str", "context_refs": "str_list"},
    "compact": {},
    "wait": {"ticks": "nonneg_int"},
    "submit_final_answer": {"artifact_paths": "str_list"},
    "submit_for_scoring": {"artifact_paths": "str_list"},
}

# fields that may be omitted; the canonical form always carries them
OPTIONAL_DEFAULTS: dict[tuple[str, str], Any] = {
    ("run_script", "args"): [],
    ("deep_think", "context_refs"): [],
}

META_FIELDS = ("turn_index", "rationale")

EDIT_FIELDS = {"op", "content", "kind", "index", "source"}
EDIT_REQUIRED = {
    "create": set(),
    "write": {"content"},
    "append": {"content"},
    "delete": set(),
    "insert_cell": {"index"},
    "replace_cell": {"index", "source"},
}

LEGACY_ALIASES = {"submit_for_scoring": "submit_final_answer"}


@dataclass(frozen=True)
class Violation:
    code: str
    message: str

    def to_dict(self) -> dict:
        return {"code": self.code, "message": self.message}


@dataclass(frozen=True)
class ValidationVerdict:
    violations: tuple = ()

    @property
    def accepted(self) -> bool:
        return not self.violations

    @property
    def codes(self) -> list[str]:
        return [v.code for v in self.violations]

    def to_dict(self) -> dict:
        return {"accepted": self.accepted, "violations": [v.to_dict() for v in self.violations]}

    @classmethod
    def reject(cls, code: str, message: str) -> "ValidationVerdict":
        return cls((Violation(code, message),))


@dataclass(frozen=True)
class Action:
    tool: str
    args: dict = field(default_factory=dict)
    turn_index: int = 0
    rationale: str = ""

    def to_dict(self) -> dict:
        out = {"tool": self.tool, "turn_index": self.turn_index, "rationale": self.rationale}
        out.update(self.args)
        return out

    def __getitem__(self, key: str) -> Any:
        return self.args[key]


def canonicalize(action: Action) -> str:
    """Sorted keys, no insignificant whitespace, no raw newlines."""
    return json.dumps(action.to_dict(), sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def parse_action(text: str) -> Action:
    """Inverse of ``canonicalize``. Raises ValueError on anything invalid."""
    verdict, action = validate(text, expected_turn=None)
    if action is None:
        raise ValueError(f"invalid action: {verdict.codes}")
    return action


# -- validation --------------------------------------------------------------


class _DuplicateKeys(dict):
    """dict that remembers which keys appeared more than once."""

    duplicates: list


def _pairs_hook(pairs):
    obj = _DuplicateKeys()
    obj.duplicates = []
    for k, v in pairs:
        if k in obj:
            obj.duplicates.append(k)
        obj[k] = v
    return obj


_decoder = json.JSONDecoder(object_pairs_hook=_pairs_hook)


def _decode_all(text: str) -> list:
    """Decode one or more concatenated JSON values; raise ValueError if any
    part is not JSON."""
    values = []
    pos = 0
    n = len(text)
    while True:
        while pos < n and text[pos].isspace():
            pos += 1
        if pos >= n:
            break
        value, pos = _decoder.raw_decode(text, pos)
        values.append(value)
    if not values:
        raise ValueError("empty payload")
    return values


def _count_tool_objects(value: Any) -> int:
    if isinstance(value, dict):
        own = 1 if "tool" in value else 0
        return own + sum(_count_tool_objects(v) for v in value.values())
    if isinstance(value, list):
        return sum(_count_tool_objects(v) for v in value)
    return 0


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _check_field(tool: str, name: str, tag: str, value: Any) -> list[Violation]:
    where = f"{tool}.{name}"
    if tag in ("path", "str"):
        if not isinstance(value, str):
            return [Violation("invalid_type", f"{where} must be a string")]
        if tag == "path" and not value:
            return [Violation("invalid_value", f"{where} must be nonempty")]
    elif tag == "nonempty_str":
        if not isinstance(value, str) or not value.strip():
            return [Violation("invalid_type", f"{where} must be a nonempty string")]
    elif tag == "nonneg_int":
        if not _is_int(value):
            return [Violation("invalid_type", f"{where} must be an integer")]
        if value < 0:
            return [Violation("invalid_value", f"{where} must be >= 0")]
    elif tag == "str_list":
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            return [Violation("invalid_type", f"{where} must be a list of strings")]
    elif tag == "kind":
        if value not in NODE_KINDS:
            return [Violation("invalid_value", f"{where} must be one of {list(NODE_KINDS)}")]
    elif tag == "edit":
        return _check_edit(where, value)
    else:  # pragma: no cover - table typo
        raise AssertionError(f"unknown field tag {tag}")
    return []


def _check_edit(where: str, value: Any) -> list[Violation]:
    if not isinstance(value, dict):
        return [Violation("invalid_type", f"{where} must be an object")]
    out = []
    for key in sorted(set(value) - EDIT_FIELDS):
        out.append(Violation("unknown_key", f"{where} has unknown key {key!r}"))
    op = value.get("op")
    if op not in EDIT_OPS:
        out.append(Violation("invalid_value", f"{where}.op must be one of {list(EDIT_OPS)}"))
        return out
    for key in sorted(EDIT_REQUIRED[op] - set(value)):
        out.append(Violation("missing_field", f"{where} op {op} requires {key!r}"))
    if "index" in value and not _is_int(value["index"]):
        out.append(Violation("invalid_type", f"{where}.index must be an integer"))
    for key in ("content", "source"):
        if key in value and not isinstance(value[key], str):
            out.append(Violation("invalid_type", f"{where}.{key} must be a string"))
    if "kind" in value and value["kind"] not in NODE_KINDS:
        out.append(Violation("invalid_value", f"{where}.kind must be a node kind"))
    return out


def validate(
    raw: Union[str, bytes], expected_turn: Optional[int]
) -> tuple[ValidationVerdict, Optional[Action]]:
    """Validate raw policy output against the action schema.

    Returns ``(verdict, action)``; ``action`` is None unless the verdict is
    accepted. ``expected_turn=None`` skips the turn check (used when
    re-parsing canonical bytes).
    """
    if isinstance(raw, (bytes, bytearray)):
        try:
            raw = bytes(raw).decode("utf-8")
        except UnicodeDecodeError as exc:
            return ValidationVerdict.reject("malformed_json", f"not UTF-8: {exc}"), None
    if not isinstance(raw, str):
        return ValidationVerdict.reject("malformed_json", "payload is not text"), None

    try:
        values = _decode_all(raw)
    except (ValueError, RecursionError) as exc:
        return ValidationVerdict.reject("malformed_json", str(exc)), None

    if len(values) > 1:
        tools = sum(_count_tool_objects(v) for v in values)
        code = "multiple_tools" if tools > 1 else "malformed_json"
        return ValidationVerdict.reject(code, f"{len(values)} JSON values in one payload"), None

    payload = values[0]
    if isinstance(payload, list):
        if _count_tool_objects(payload) > 1:
            return ValidationVerdict.reject("multiple_tools", "array of tool invocations"), None
        return ValidationVerdict.reject("not_object", "top-level value must be an object"), None
    if not isinstance(payload, dict):
        return ValidationVerdict.reject("not_object", "top-level value must be an object"), None

    violations: list[Violation] = []
    if "tool" in payload.duplicates:
        violations.append(Violation("multiple_tools", "duplicate 'tool' key"))
    for key in sorted(set(payload.duplicates) - {"tool"}):
        violations.append(Violation("duplicate_key", f"duplicate key {key!r}"))
    if _count_tool_objects(payload) > 1 and "tool" not in payload.duplicates:
        violations.append(Violation("multiple_tools", "nested tool invocation"))

    tool = payload.get("tool")
    if tool is None:
        violations.append(Violation("missing_tool", "no 'tool' key"))
        spec = None
    elif not isinstance(tool, str) or tool not in TOOLS:
        violations.append(Violation("unknown_tool", f"unknown tool {tool!r}"))
        spec = None
    else:
        spec = TOOLS[tool]

    allowed = {"tool", *META_FIELDS} | (set(spec) if spec is not None else set(payload))
    for key in sorted(set(payload) - allowed):
        violations.append(Violation("unknown_key", f"unknown key {key!r}"))

    args: dict = {}
    if spec is not None:
        for name, tag in spec.items():
            if name not in payload:
                if (tool, name) in OPTIONAL_DEFAULTS:
                    args[name] = list(OPTIONAL_DEFAULTS[(tool, name)])
                    continue
                violations.append(Violation("missing_field", f"{tool} requires {name!r}"))
                continue
            problems = _check_field(tool, name, tag, payload[name])
            violations.extend(problems)
            if not problems:
                args[name] = payload[name]

    turn = payload.get("turn_index")
    if "turn_index" not in payload:
        violations.append(Violation("missing_field", "turn_index is required"))
    elif not _is_int(turn) or turn < 0:
        violations.append(Violation("invalid_type", "turn_index must be a nonnegative integer"))
    elif expected_turn is not None and turn != expected_turn:
        violations.append(
            Violation("turn_mismatch", f"turn_index {turn} != expected {expected_turn}")
        )
    rationale = payload.get("rationale", "")
    if not isinstance(rationale, str):
        violations.append(Violation("invalid_type", "rationale must be a string"))

    verdict = ValidationVerdict(tuple(violations))
    if not verdict.accepted:
        return verdict, None
    return verdict, Action(tool=tool, args=args, turn_index=turn, rationale=rationale)


# -- machine-readable schema ---------------------------------------------------

_TAG_SCHEMAS = {
    "path": {"type": "string", "minLength": 1},
    "str": {"type": "string"},
    "nonempty_str": {"type": "string", "minLength": 1},
    "nonneg_int": {"type": "integer", "minimum": 0},
    "str_list": {"type": "array", "items": {"type": "string"}},
    "kind": {"enum": list(NODE_KINDS)},
    "edit": {
        "type": "object",
        "additionalProperties": False,
        "required": ["op"],
        "properties": {
            "op": {"enum": list(EDIT_OPS)},
            "content": {"type": "string"},
            "kind": {"enum": list(NODE_KINDS)},
            "index": {"type": "integer"},
            "source": {"type": "string"},
        },
    },
}


def action_schema() -> dict:
    """JSON Schema (draft 2020-12) for a single action object."""
    variants = []
    for tool, spec in TOOLS.items():
        props = {
            "tool": {"const": tool},
            "turn_index": {"type": "integer", "minimum": 0},
            "rationale": {"type": "string"},
        }
        props.update({name: _TAG_SCHEMAS[tag] for name, tag in spec.items()})
        required = ["tool", "turn_index"] + [
            name for name in spec if (tool, name) not in OPTIONAL_DEFAULTS
        ]
        variants.append(
            {
                "title": tool,
                "type": "object",
                "additionalProperties": False,
                "required": required,
                "properties": props,
            }
        )
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "action",
        "oneOf": variants,
    }
