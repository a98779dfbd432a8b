from __future__ import annotations

import json
from pathlib import Path

import pytest

from agent_permissions.diagnostics import Severity, summarize
from agent_permissions.manifest import parse_manifest
from agent_permissions.validation import is_rfc3339, load_schema, schema_validator, validate_manifest

FIXTURES = Path(__file__).parent / "fixtures"


def lint(obj) -> list:
    return validate_manifest(parse_manifest(json.dumps(obj), strict=False))


def codes(obj):
    return [d.code for d in lint(obj)]


def base(**extra):
    out = {"metadata": {"schema_version": "1.0", "last_updated": "2025-01-01T00:00:00Z"}, "resource_rules": []}
    out.update(extra)
    return out


@pytest.mark.parametrize("path", sorted((FIXTURES / "clean").glob("*.json")), ids=lambda p: p.stem)
def test_clean_corpus_has_no_findings(path):
    diags = validate_manifest(parse_manifest(path.read_bytes()))
    assert diags == []
    assert summarize(diags) == "0 errors, 0 warnings"


@pytest.mark.parametrize("path", sorted((FIXTURES / "lint").glob("*.json")), ids=lambda p: p.stem)
def test_lint_file_triggers_its_code(path):
    found = [d.code for d in validate_manifest(parse_manifest(path.read_bytes(), strict=False))]
    assert path.stem.upper() in found


def test_sample_fixture_validates_against_shipped_schema():
    doc = json.loads((FIXTURES / "manifests" / "sample.json").read_text())
    assert list(schema_validator().iter_errors(doc)) == []
    assert load_schema()["$schema"].endswith("2020-12/schema")


def test_severities():
    diags = lint(
        base(
            resource_rules=[
                {"verb": "hover", "selector": "a", "allowed": True, "extra": 1},
                {"verb": "click_element", "selector": "a", "allowed": False, "modifiers": {"human_in_the_loop": True}},
            ],
            api=[{"type": "soap", "endpoint": "https://x.test/wsdl"}],
        )
    )
    by_code = {d.code: d for d in diags}
    assert by_code["UNKNOWN_VERB"].severity is Severity.WARNING
    assert by_code["UNKNOWN_KEY"].severity is Severity.INFO
    assert by_code["UNKNOWN_KEY"].path == "$.resource_rules[0].extra"
    assert by_code["MODIFIER_ON_DENY"].severity is Severity.WARNING
    assert by_code["UNKNOWN_API_TYPE"].severity is Severity.INFO


def test_missing_last_updated_is_a_warning():
    assert codes({"metadata": {"schema_version": "1"}, "resource_rules": []}) == ["MISSING_LAST_UPDATED"]


@pytest.mark.parametrize(
    "mods, code",
    [
        ({}, "EMPTY_MODIFIERS"),
        ({"rate_limit": {"max_requests": 0, "window_seconds": 10}}, "INVALID_RATE_LIMIT"),
        ({"rate_limit": {"max_requests": 1, "window_seconds": 0}}, "INVALID_RATE_LIMIT"),
        ({"max_concurrent": 0}, "INVALID_MAX_CONCURRENT"),
        ({"time_window": {"start": "9:00", "end": "17:00"}}, "INVALID_TIME_WINDOW"),
        ({"time_window": {"start": "09:00", "end": "09:00"}}, "INVALID_TIME_WINDOW"),
        ({"time_window": {"start": "09:00", "end": "10:00", "timezone": "Mars/Olympus"}}, "INVALID_TIME_WINDOW"),
        ({"retry_after": 4}, "UNKNOWN_MODIFIER"),
    ],
)
def test_modifier_checks(mods, code):
    rule = {"verb": "click_element", "selector": "a", "allowed": True, "modifiers": mods}
    assert code in codes(base(resource_rules=[rule]))


def test_errors_not_duplicated_by_schema_backstop():
    rule = {"verb": "click_element", "selector": "a", "allowed": True,
            "modifiers": {"rate_limit": {"max_requests": 0, "window_seconds": 10}}}
    found = codes(base(resource_rules=[rule]))
    assert found.count("INVALID_RATE_LIMIT") == 1
    assert "SCHEMA_VIOLATION" not in found


def test_every_error_listed_in_document_order():
    found = codes(
        base(
            resource_rules=[
                {"verb": "click_element", "selector": "a:hover", "allowed": True},
                {"verb": "", "selector": "a", "allowed": True},
            ],
            action_guidelines=[{"directive": "must", "description": " "}],
            api=[{"type": "openapi", "endpoint": "not a uri"}],
        )
    )
    assert found == ["INVALID_SELECTOR", "INVALID_VERB", "INVALID_DIRECTIVE", "INVALID_DESCRIPTION", "INVALID_URI"]


def test_duplicate_rule_normalizes_selector_text():
    rules = [
        {"verb": "click_element", "selector": "a.x  >  b", "allowed": True},
        {"verb": "click_element", "selector": "A.x>b", "allowed": False},
    ]
    diags = [d for d in lint(base(resource_rules=rules)) if d.code == "DUPLICATE_RULE"]
    assert [d.path for d in diags] == ["$.resource_rules[1]"]


def test_schema_version_and_timestamp():
    found = codes({"metadata": {"schema_version": "v1", "last_updated": "yesterday"}, "resource_rules": []})
    assert found == ["INVALID_SCHEMA_VERSION", "INVALID_TIMESTAMP"]


@pytest.mark.parametrize(
    "value, ok",
    [
        ("2025-01-01T00:00:00Z", True),
        ("2025-01-01t00:00:00.5+05:30", True),
        ("2025-02-30T00:00:00Z", False),
        ("2025-01-01 00:00:00Z", False),
        ("2025-01-01T00:00:00", False),
    ],
)
def test_rfc3339(value, ok):
    assert is_rfc3339(value) is ok


def test_diagnostic_line_format():
    d = lint(base(resource_rules=[{"verb": "zap", "selector": "a", "allowed": True}]))[0]
    assert str(d) == "WARNING UNKNOWN_VERB $.resource_rules[0].verb unknown verb 'zap'"
