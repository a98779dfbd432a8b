"""Parse, validate, discover, evaluate and generate ``agent-permissions.json`` manifests."""

__version__ = "0.1.0"

from .diagnostics import Diagnostic, Severity
from .dom import element_from_html
from .engine import (
    ClockRegression,
    ConcurrencySlotRequired,
    Decision,
    DefaultPolicy,
    EnforcementState,
    HumanInTheLoop,
    Outcome,
    PermissionQuery,
    ReleaseWithoutAcquire,
    ThrottleWait,
    acquire,
    evaluate,
    explain,
    guidelines_for,
    release,
)
from .manifest import (
    ActionGuideline,
    ApiReference,
    Manifest,
    Metadata,
    Modifiers,
    ParseError,
    RateLimit,
    ResourceRule,
    TimeWindow,
    Verb,
    parse_manifest,
    serialize_manifest,
)
from .selectors import ElementDescriptor, matches, parse_selector, specificity
from .validation import validate_manifest

__all__ = [
    "ActionGuideline",
    "ApiReference",
    "ClockRegression",
    "ConcurrencySlotRequired",
    "Decision",
    "DefaultPolicy",
    "Diagnostic",
    "ElementDescriptor",
    "EnforcementState",
    "HumanInTheLoop",
    "Manifest",
    "Metadata",
    "Modifiers",
    "Outcome",
    "ParseError",
    "PermissionQuery",
    "RateLimit",
    "ReleaseWithoutAcquire",
    "ResourceRule",
    "Severity",
    "ThrottleWait",
    "TimeWindow",
    "Verb",
    "acquire",
    "element_from_html",
    "evaluate",
    "explain",
    "guidelines_for",
    "matches",
    "parse_manifest",
    "parse_selector",
    "release",
    "serialize_manifest",
    "specificity",
    "validate_manifest",
]
