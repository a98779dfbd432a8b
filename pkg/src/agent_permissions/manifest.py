"""The ``agent-permissions.json`` data model, parser and canonical serializer."""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Any, Mapping

from .diagnostics import Diagnostic, error, errors_in
from .selectors import SelectorError, SelectorList, parse_selector

WELL_KNOWN_PATH = "/.well-known/agent-permissions.json"
MEDIA_TYPE = "application/json"


class Verb(str, Enum):
    READ_CONTENT = "read_content"
    CLICK_ELEMENT = "click_element"
    FILL_INPUT = "fill_input"
    SUBMIT_FORM = "submit_form"
    FOLLOW_LINK = "follow_link"
    PLAY_MEDIA = "play_media"
    DOWNLOAD_FILE = "download_file"


class ApiType(str, Enum):
    OPENAPI = "openapi"
    MCP = "mcp"
    A2A = "a2a"


KNOWN_VERBS = frozenset(v.value for v in Verb)
KNOWN_API_TYPES = frozenset(t.value for t in ApiType)
DIRECTIVES = ("MUST", "MUST NOT", "SHOULD", "SHOULD NOT", "MAY")

TOP_LEVEL_KEYS = ("metadata", "resource_rules", "action_guidelines", "api")
METADATA_KEYS = ("schema_version", "last_updated", "author")
RULE_KEYS = ("verb", "selector", "allowed", "modifiers")
MODIFIER_KEYS = ("human_in_the_loop", "rate_limit", "max_concurrent", "time_window")
GUIDELINE_KEYS = ("directive", "description", "exceptions")
API_KEYS = ("type", "endpoint", "docs", "description")


# --- Errors ---------------------------------------------------------------------


class ParseError(ValueError):
    """A manifest could not be parsed (strictly).

    ``diagnostics`` holds every error found, not just the first.
    """

    code = "PARSE_ERROR"

    def __init__(self, message: str, path: str = "$", diagnostics: tuple[Diagnostic, ...] = ()):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.diagnostics = diagnostics

    @property
    def index(self) -> int | None:
        m = re.search(r"\[(\d+)\]", self.path)
        return int(m.group(1)) if m else None


class NotUtf8(ParseError):
    code = "NOT_UTF8"


class NotJson(ParseError):
    code = "NOT_JSON"


class MissingField(ParseError):
    code = "MISSING_FIELD"


class TypeMismatch(ParseError):
    code = "TYPE_MISMATCH"


class InvalidSelector(ParseError):
    code = "INVALID_SELECTOR"


class InvalidDirective(ParseError):
    code = "INVALID_DIRECTIVE"


class InvalidRateLimit(ParseError):
    code = "INVALID_RATE_LIMIT"


class InvalidValue(ParseError):
    code = "INVALID_VALUE"


_ERRORS_BY_CODE = {
    cls.code: cls
    for cls in (NotUtf8, NotJson, MissingField, TypeMismatch, InvalidSelector,
                InvalidDirective, InvalidRateLimit)
}


# --- Model ----------------------------------------------------------------------


@dataclass(frozen=True)
class Metadata:
    schema_version: str
    last_updated: str | None = None
    author: str | None = None
    extra: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class RateLimit:
    max_requests: int
    window_seconds: int


@dataclass(frozen=True)
class TimeWindow:
    start: str
    end: str
    timezone: str = "UTC"


@dataclass(frozen=True)
class Modifiers:
    human_in_the_loop: bool | None = None
    rate_limit: RateLimit | None = None
    max_concurrent: int | None = None
    time_window: TimeWindow | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def is_empty(self) -> bool:
        return (
            self.human_in_the_loop is None
            and self.rate_limit is None
            and self.max_concurrent is None
            and self.time_window is None
            and not self.extra
        )


@dataclass(frozen=True)
class ResourceRule:
    verb: str
    selector: str
    allowed: bool
    modifiers: Modifiers | None = None
    source_index: int = 0
    extra: dict[str, Any] = field(default_factory=dict)
    ast: SelectorList | None = field(init=False, compare=False, repr=False)
    selector_error: str | None = field(init=False, compare=False, repr=False)

    def __post_init__(self) -> None:
        ast, problem = None, None
        try:
            ast = parse_selector(self.selector)
        except SelectorError as exc:
            problem = str(exc)
        object.__setattr__(self, "ast", ast)
        object.__setattr__(self, "selector_error", problem)

    @property
    def verb_is_known(self) -> bool:
        return self.verb in KNOWN_VERBS


@dataclass(frozen=True)
class ActionGuideline:
    directive: str
    description: str
    exceptions: str | None = None
    extra: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class ApiReference:
    type: str
    endpoint: str
    docs: str | None = None
    description: str | None = None
    extra: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class Manifest:
    metadata: Metadata
    resource_rules: tuple[ResourceRule, ...] = ()
    action_guidelines: tuple[ActionGuideline, ...] = ()
    api: tuple[ApiReference, ...] = ()
    extra: dict[str, Any] = field(default_factory=dict)
    # Issues a lenient parse had to drop; validate_manifest reports them.
    parse_diagnostics: tuple[Diagnostic, ...] = field(default=(), compare=False, repr=False)

    def __post_init__(self) -> None:
        for name in ("resource_rules", "action_guidelines", "api", "parse_diagnostics"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    @cached_property
    def identity(self) -> str:
        """Content hash of the canonical form, used to key enforcement state."""
        return hashlib.sha256(serialize_manifest(self)).hexdigest()[:16]

    def rule(self, source_index: int) -> ResourceRule:
        for rule in self.resource_rules:
            if rule.source_index == source_index:
                return rule
        raise KeyError(source_index)


# --- Parsing --------------------------------------------------------------------


def _kind(value: Any) -> str:
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "boolean"
    if isinstance(value, (int, float)):
        return "number"
    if isinstance(value, str):
        return "string"
    if isinstance(value, list):
        return "array"
    return "object"


class _Dropped(Exception):
    """Internal: the current sub-object is unusable and is skipped."""


class _Reader:
    def __init__(self) -> None:
        self.diagnostics: list[Diagnostic] = []

    def fail(self, code: str, path: str, message: str) -> None:
        self.diagnostics.append(error(code, path, message))
        raise _Dropped

    def field(self, obj: Mapping[str, Any], key: str, path: str, kind: str,
              required: bool = False) -> Any:
        if key not in obj:
            if required:
                self.fail("MISSING_FIELD", f"{path}.{key}", f"required field {key!r} is missing")
            return None
        value = obj[key]
        if kind == "integer":
            ok = isinstance(value, int) and not isinstance(value, bool)
        else:
            ok = _kind(value) == kind
        if not ok:
            self.fail("TYPE_MISMATCH", f"{path}.{key}", f"expected {kind}, got {_kind(value)}")
        return value

    def optional(self, obj, key, path, kind):
        """Like :meth:`field` but a bad optional value is dropped, not the parent."""
        try:
            return self.field(obj, key, path, kind)
        except _Dropped:
            return None

    def dict_of(self, obj: Any, path: str) -> dict[str, Any]:
        if not isinstance(obj, dict):
            self.fail("TYPE_MISMATCH", path, f"expected object, got {_kind(obj)}")
        return obj


def _extras(obj: Mapping[str, Any], known: tuple[str, ...]) -> dict[str, Any]:
    return {k: v for k, v in obj.items() if k not in known}


def _read_metadata(r: _Reader, obj: Any) -> Metadata:
    obj = r.dict_of(obj, "$.metadata")
    return Metadata(
        schema_version=r.field(obj, "schema_version", "$.metadata", "string", required=True),
        last_updated=r.optional(obj, "last_updated", "$.metadata", "string"),
        author=r.optional(obj, "author", "$.metadata", "string"),
        extra=_extras(obj, METADATA_KEYS),
    )


def _read_modifiers(r: _Reader, obj: Any, path: str) -> Modifiers:
    obj = r.dict_of(obj, path)
    rate_limit = time_window = None
    raw_rate = r.optional(obj, "rate_limit", path, "object")
    if raw_rate is not None:
        rpath = f"{path}.rate_limit"
        try:
            max_requests = r.field(raw_rate, "max_requests", rpath, "integer", required=True)
            window = r.field(raw_rate, "window_seconds", rpath, "integer", required=True)
            rate_limit = RateLimit(max_requests, window)
        except _Dropped:
            pass
    raw_window = r.optional(obj, "time_window", path, "object")
    if raw_window is not None:
        wpath = f"{path}.time_window"
        try:
            time_window = TimeWindow(
                r.field(raw_window, "start", wpath, "string", required=True),
                r.field(raw_window, "end", wpath, "string", required=True),
                r.optional(raw_window, "timezone", wpath, "string") or "UTC",
            )
        except _Dropped:
            pass
    return Modifiers(
        human_in_the_loop=r.optional(obj, "human_in_the_loop", path, "boolean"),
        rate_limit=rate_limit,
        max_concurrent=r.optional(obj, "max_concurrent", path, "integer"),
        time_window=time_window,
        extra=_extras(obj, MODIFIER_KEYS),
    )


def _read_rule(r: _Reader, obj: Any, index: int) -> ResourceRule:
    path = f"$.resource_rules[{index}]"
    obj = r.dict_of(obj, path)
    verb = r.field(obj, "verb", path, "string", required=True)
    selector = r.field(obj, "selector", path, "string", required=True)
    allowed = r.field(obj, "allowed", path, "boolean", required=True)
    modifiers = None
    if "modifiers" in obj:
        try:
            modifiers = _read_modifiers(r, obj["modifiers"], f"{path}.modifiers")
        except _Dropped:
            pass
    return ResourceRule(verb, selector, allowed, modifiers, index, _extras(obj, RULE_KEYS))


def _read_guideline(r: _Reader, obj: Any, index: int) -> ActionGuideline:
    path = f"$.action_guidelines[{index}]"
    obj = r.dict_of(obj, path)
    return ActionGuideline(
        directive=r.field(obj, "directive", path, "string", required=True),
        description=r.field(obj, "description", path, "string", required=True),
        exceptions=r.optional(obj, "exceptions", path, "string"),
        extra=_extras(obj, GUIDELINE_KEYS),
    )


def _read_api(r: _Reader, obj: Any, index: int) -> ApiReference:
    path = f"$.api[{index}]"
    obj = r.dict_of(obj, path)
    return ApiReference(
        type=r.field(obj, "type", path, "string", required=True),
        endpoint=r.field(obj, "endpoint", path, "string", required=True),
        docs=r.optional(obj, "docs", path, "string"),
        description=r.optional(obj, "description", path, "string"),
        extra=_extras(obj, API_KEYS),
    )


def _read_list(r: _Reader, doc: dict, key: str, reader) -> list:
    if key not in doc:
        return []
    items = doc[key]
    if not isinstance(items, list):
        r.diagnostics.append(
            error("TYPE_MISMATCH", f"$.{key}", f"expected array, got {_kind(items)}")
        )
        return []
    out = []
    for i, item in enumerate(items):
        try:
            out.append(reader(r, item, i))
        except _Dropped:
            pass
    return out


def _reject_constant(name: str) -> Any:
    raise NotJson(f"invalid JSON: {name} is not a JSON number")


def _finite_float(text: str) -> float:
    value = float(text)
    if math.isinf(value):
        raise NotJson(f"invalid JSON: number {text} is out of range")
    return value


def decode_document(raw: bytes | str) -> dict[str, Any]:
    """Decode *raw* to a JSON object, raising the fatal parse errors."""
    if isinstance(raw, (bytes, bytearray)):
        if raw.startswith(b"\xef\xbb\xbf"):
            raw = raw[3:]
        try:
            text = bytes(raw).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise NotUtf8(f"document is not valid UTF-8 ({exc.reason} at byte {exc.start})") from exc
    else:
        text = raw
    try:
        doc = json.loads(text, parse_constant=_reject_constant, parse_float=_finite_float)
    except json.JSONDecodeError as exc:
        raise NotJson(f"invalid JSON: {exc.msg} (line {exc.lineno}, column {exc.colno})") from exc
    if not isinstance(doc, dict):
        raise TypeMismatch(f"expected a JSON object, got {_kind(doc)}")
    return doc


def manifest_from_dict(doc: Mapping[str, Any], *, strict: bool = True) -> Manifest:
    if "metadata" not in doc:
        raise MissingField("required field 'metadata' is missing", "$.metadata")
    if strict and "resource_rules" not in doc:
        raise MissingField("required field 'resource_rules' is missing", "$.resource_rules")
    r = _Reader()
    try:
        metadata = _read_metadata(r, doc["metadata"])
    except _Dropped:
        first = r.diagnostics[0]
        raise _ERRORS_BY_CODE.get(first.code, ParseError)(
            first.message, first.path, tuple(r.diagnostics)
        ) from None
    if "resource_rules" not in doc:
        r.diagnostics.append(
            error("MISSING_FIELD", "$.resource_rules", "required field 'resource_rules' is missing")
        )
    manifest = Manifest(
        metadata=metadata,
        resource_rules=_read_list(r, doc, "resource_rules", _read_rule),
        action_guidelines=_read_list(r, doc, "action_guidelines", _read_guideline),
        api=_read_list(r, doc, "api", _read_api),
        extra=_extras(doc, TOP_LEVEL_KEYS),
        parse_diagnostics=tuple(r.diagnostics),
    )
    if strict:
        from .validation import validate_manifest

        problems = errors_in(validate_manifest(manifest))
        if problems:
            first = problems[0]
            raise _ERRORS_BY_CODE.get(first.code, InvalidValue)(
                first.message, first.path, tuple(problems)
            )
    return manifest


def parse_manifest(raw: bytes | str, *, strict: bool = True) -> Manifest:
    """Parse an ``agent-permissions.json`` document.

    Strict mode raises a :class:`ParseError` subclass for the first error.
    Lenient mode only raises for unrecoverable documents (not UTF-8, not
    JSON, not an object, no ``metadata``); everything else is kept when
    possible, dropped otherwise, and reported by ``validate_manifest``.
    """
    return manifest_from_dict(decode_document(raw), strict=strict)


# --- Serialization --------------------------------------------------------------


def _put(out: dict[str, Any], key: str, value: Any) -> None:
    if value is not None:
        out[key] = value


def _modifiers_to_dict(m: Modifiers) -> dict[str, Any]:
    out: dict[str, Any] = {}
    _put(out, "human_in_the_loop", m.human_in_the_loop)
    if m.rate_limit is not None:
        out["rate_limit"] = {
            "max_requests": m.rate_limit.max_requests,
            "window_seconds": m.rate_limit.window_seconds,
        }
    _put(out, "max_concurrent", m.max_concurrent)
    if m.time_window is not None:
        out["time_window"] = {
            "start": m.time_window.start,
            "end": m.time_window.end,
            "timezone": m.time_window.timezone,
        }
    out.update(m.extra)
    return out


def rule_to_dict(rule: ResourceRule) -> dict[str, Any]:
    out: dict[str, Any] = {"verb": rule.verb, "selector": rule.selector, "allowed": rule.allowed}
    if rule.modifiers is not None:
        out["modifiers"] = _modifiers_to_dict(rule.modifiers)
    out.update(rule.extra)
    return out


def manifest_to_dict(m: Manifest) -> dict[str, Any]:
    meta: dict[str, Any] = {"schema_version": m.metadata.schema_version}
    _put(meta, "last_updated", m.metadata.last_updated)
    _put(meta, "author", m.metadata.author)
    meta.update(m.metadata.extra)
    out: dict[str, Any] = {
        "metadata": meta,
        "resource_rules": [
            rule_to_dict(rule) for rule in sorted(m.resource_rules, key=lambda r: r.source_index)
        ],
    }
    if m.action_guidelines:
        guidelines = []
        for g in m.action_guidelines:
            item = {"directive": g.directive, "description": g.description}
            _put(item, "exceptions", g.exceptions)
            item.update(g.extra)
            guidelines.append(item)
        out["action_guidelines"] = guidelines
    if m.api:
        refs = []
        for a in m.api:
            item = {"type": a.type, "endpoint": a.endpoint}
            _put(item, "docs", a.docs)
            _put(item, "description", a.description)
            item.update(a.extra)
            refs.append(item)
        out["api"] = refs
    out.update(m.extra)
    return out


def serialize_manifest(m: Manifest) -> bytes:
    """Canonical UTF-8 JSON: fixed key order, two-space indent, trailing newline."""
    text = json.dumps(manifest_to_dict(m), indent=2, ensure_ascii=False)
    return (text + "\n").encode("utf-8")
