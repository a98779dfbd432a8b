"""Manifest linting: invariant errors, authoring warnings, informational notes."""

from __future__ import annotations

import json
import re
from datetime import datetime
from functools import lru_cache
from importlib import resources
from typing import Any
from zoneinfo import ZoneInfo, ZoneInfoNotFoundError

from jsonschema import Draft202012Validator

from .diagnostics import Diagnostic, Severity, error, info, warning
from .manifest import (
    DIRECTIVES,
    KNOWN_API_TYPES,
    Manifest,
    Modifiers,
    manifest_to_dict,
)

_VERSION = re.compile(r"[0-9]+(\.[0-9]+)*\Z")
_RFC3339 = re.compile(
    r"\d{4}-\d{2}-\d{2}[Tt]\d{2}:\d{2}:\d{2}(\.\d+)?([Zz]|[+-]\d{2}:\d{2})\Z"
)
_TIME_OF_DAY = re.compile(r"([01][0-9]|2[0-3]):[0-5][0-9]\Z")
_URI = re.compile(r"[A-Za-z][A-Za-z0-9+.\-]*:\S+\Z")


@lru_cache(maxsize=None)
def load_schema(name: str = "manifest") -> dict[str, Any]:
    text = resources.files("agent_permissions").joinpath(f"schemas/{name}.schema.json").read_text()
    return json.loads(text)


@lru_cache(maxsize=None)
def schema_validator(name: str = "manifest") -> Draft202012Validator:
    return Draft202012Validator(load_schema(name))


def is_rfc3339(value: str) -> bool:
    if not _RFC3339.match(value):
        return False
    try:
        # Fractions are dropped: 3.10's fromisoformat only takes 3 or 6 digits.
        plain = re.sub(r"\.\d+", "", value.replace("t", "T"))
        datetime.fromisoformat(re.sub(r"[Zz]\Z", "+00:00", plain))
    except ValueError:
        return False
    return True


def is_uri(value: str) -> bool:
    return bool(_URI.match(value))


def is_valid_timezone(name: str) -> bool:
    if name == "UTC":
        return True
    try:
        ZoneInfo(name)
    except (ZoneInfoNotFoundError, ValueError):
        return False
    return True


def _check_modifiers(mods: Modifiers, path: str, allowed: bool) -> list[Diagnostic]:
    out = []
    if mods.is_empty:
        out.append(warning("EMPTY_MODIFIERS", path, "modifiers object sets nothing"))
    elif not allowed:
        out.append(
            warning("MODIFIER_ON_DENY", path, "modifiers on a denied rule have no effect")
        )
    if mods.rate_limit is not None:
        rl = mods.rate_limit
        if rl.max_requests < 1 or rl.window_seconds < 1:
            out.append(
                error(
                    "INVALID_RATE_LIMIT",
                    f"{path}.rate_limit",
                    "max_requests and window_seconds must both be >= 1",
                )
            )
    if mods.max_concurrent is not None and mods.max_concurrent < 1:
        out.append(
            error("INVALID_MAX_CONCURRENT", f"{path}.max_concurrent", "max_concurrent must be >= 1")
        )
    tw = mods.time_window
    if tw is not None:
        wpath = f"{path}.time_window"
        for key in ("start", "end"):
            if not _TIME_OF_DAY.match(getattr(tw, key)):
                out.append(
                    error("INVALID_TIME_WINDOW", f"{wpath}.{key}", f"{key} must be HH:MM (24h)")
                )
        if tw.start == tw.end:
            out.append(error("INVALID_TIME_WINDOW", wpath, "start and end must differ"))
        if not is_valid_timezone(tw.timezone):
            out.append(
                error("INVALID_TIME_WINDOW", f"{wpath}.timezone", f"unknown timezone {tw.timezone!r}")
            )
    for key in mods.extra:
        out.append(warning("UNKNOWN_MODIFIER", f"{path}.{key}", f"unknown modifier {key!r}"))
    return out


def _unknown_keys(extra: dict[str, Any], path: str) -> list[Diagnostic]:
    return [info("UNKNOWN_KEY", f"{path}.{key}", f"unknown key {key!r}") for key in extra]


def _schema_path(parts) -> str:
    out = "$"
    for part in parts:
        out += f"[{part}]" if isinstance(part, int) else f".{part}"
    return out


def _overlaps(a: str, b: str) -> bool:
    """True if one JSON path equals or contains the other."""
    if len(a) < len(b):
        a, b = b, a
    return a == b or a.startswith(b + ".") or a.startswith(b + "[")


def validate_manifest(m: Manifest) -> list[Diagnostic]:
    """Return every diagnostic for *m*, in document order."""
    out: list[Diagnostic] = list(m.parse_diagnostics)

    meta = m.metadata
    if not _VERSION.match(meta.schema_version):
        out.append(
            error(
                "INVALID_SCHEMA_VERSION",
                "$.metadata.schema_version",
                f"{meta.schema_version!r} is not a dotted integer version",
            )
        )
    if meta.last_updated is None:
        out.append(warning("MISSING_LAST_UPDATED", "$.metadata", "last_updated is not set"))
    elif not is_rfc3339(meta.last_updated):
        out.append(
            error(
                "INVALID_TIMESTAMP",
                "$.metadata.last_updated",
                f"{meta.last_updated!r} is not an RFC 3339 timestamp",
            )
        )
    out.extend(_unknown_keys(meta.extra, "$.metadata"))

    seen: dict[tuple[str, str], int] = {}
    for rule in m.resource_rules:
        path = f"$.resource_rules[{rule.source_index}]"
        if not rule.verb:
            out.append(error("INVALID_VERB", f"{path}.verb", "verb must be non-empty"))
        elif not rule.verb_is_known:
            out.append(warning("UNKNOWN_VERB", f"{path}.verb", f"unknown verb {rule.verb!r}"))
        if rule.ast is None:
            out.append(error("INVALID_SELECTOR", f"{path}.selector", rule.selector_error or "invalid selector"))
        if rule.modifiers is not None:
            out.extend(_check_modifiers(rule.modifiers, f"{path}.modifiers", rule.allowed))
        key = (rule.verb, str(rule.ast) if rule.ast is not None else rule.selector)
        if key in seen:
            out.append(
                warning(
                    "DUPLICATE_RULE",
                    path,
                    f"same verb and selector as $.resource_rules[{seen[key]}]",
                )
            )
        else:
            seen[key] = rule.source_index
        out.extend(_unknown_keys(rule.extra, path))

    for i, g in enumerate(m.action_guidelines):
        path = f"$.action_guidelines[{i}]"
        if g.directive not in DIRECTIVES:
            out.append(
                error(
                    "INVALID_DIRECTIVE",
                    f"{path}.directive",
                    f"{g.directive!r} is not one of {', '.join(DIRECTIVES)}",
                )
            )
        if not g.description.strip():
            out.append(error("INVALID_DESCRIPTION", f"{path}.description", "description is empty"))
        out.extend(_unknown_keys(g.extra, path))

    for i, ref in enumerate(m.api):
        path = f"$.api[{i}]"
        if not ref.type:
            out.append(error("INVALID_API_TYPE", f"{path}.type", "type must be non-empty"))
        elif ref.type not in KNOWN_API_TYPES:
            out.append(info("UNKNOWN_API_TYPE", f"{path}.type", f"unrecognized API type {ref.type!r}"))
        if not is_uri(ref.endpoint):
            out.append(error("INVALID_URI", f"{path}.endpoint", f"{ref.endpoint!r} is not a URI"))
        if ref.docs is not None and not is_uri(ref.docs):
            out.append(error("INVALID_URI", f"{path}.docs", f"{ref.docs!r} is not a URI"))
        out.extend(_unknown_keys(ref.extra, path))

    out.extend(_unknown_keys(m.extra, "$"))

    # The shipped schema is the normative artifact; report anything it rejects
    # that the specific checks above did not already cover.
    covered = [d.path for d in out if d.severity is Severity.ERROR]
    for problem in schema_validator("manifest").iter_errors(manifest_to_dict(m)):
        path = _schema_path(problem.absolute_path)
        if any(_overlaps(path, c) for c in covered):
            continue
        out.append(error("SCHEMA_VIOLATION", path, problem.message))
        covered.append(path)
    return out
