from __future__ import annotations

import json
from pathlib import Path

import pytest
from hypothesis import given, settings

from agent_permissions.manifest import (
    InvalidDirective,
    InvalidRateLimit,
    InvalidSelector,
    MissingField,
    Modifiers,
    NotJson,
    NotUtf8,
    ParseError,
    RateLimit,
    TypeMismatch,
    Verb,
    manifest_to_dict,
    parse_manifest,
    serialize_manifest,
)
from strategies import manifests

FIXTURES = Path(__file__).parent / "fixtures"
SAMPLE = FIXTURES / "manifests" / "sample.json"


def doc(**overrides):
    base = {"metadata": {"schema_version": "1.0"}, "resource_rules": []}
    base.update(overrides)
    return json.dumps(base)


def rule(**overrides):
    out = {"verb": "click_element", "selector": "a", "allowed": True}
    out.update(overrides)
    return out


def test_sample_fixture_fields():
    m = parse_manifest(SAMPLE.read_bytes())
    assert [r.verb for r in m.resource_rules] == ["click_element", "follow_link", "click_element"]
    assert [r.selector for r in m.resource_rules] == [".no-agent", "*", "#post"]
    assert [r.allowed for r in m.resource_rules] == [False, True, True]
    assert m.resource_rules[1].modifiers == Modifiers(human_in_the_loop=True)
    assert m.resource_rules[2].modifiers.rate_limit == RateLimit(10, 3600)
    assert m.action_guidelines[1].exceptions == "MAY message site administrators."
    assert [a.type for a in m.api] == ["openapi", "mcp"]
    assert m.api[1].docs == "https://docs.example.com/mcp"


def test_sample_fixture_is_already_canonical():
    assert serialize_manifest(parse_manifest(SAMPLE.read_bytes())) == SAMPLE.read_bytes()


def test_canonical_form_details():
    m = parse_manifest(
        doc(
            resource_rules=[rule(modifiers={"time_window": {"start": "09:00", "end": "17:00"}})],
            api=[],
            zzz=1,
        )
    )
    text = serialize_manifest(m).decode()
    assert text.endswith("}\n") and not text.endswith("\n\n")
    assert '"timezone": "UTC"' in text
    assert '"api"' not in text and '"action_guidelines"' not in text
    assert list(json.loads(text)) == ["metadata", "resource_rules", "zzz"]
    assert text.splitlines()[1] == '  "metadata": {'


def test_non_ascii_kept_verbatim():
    m = parse_manifest(doc(metadata={"schema_version": "1.0", "author": "Zoë · Café"}))
    assert "Zoë · Café".encode() in serialize_manifest(m)


def test_bom_is_accepted():
    assert parse_manifest(b"\xef\xbb\xbf" + doc().encode()).resource_rules == ()


@pytest.mark.parametrize(
    "raw, exc",
    [
        (b"\xff\xfe{}", NotUtf8),
        ("{not json", NotJson),
        ('{"metadata": {"schema_version": "1"}, "resource_rules": [], "x": NaN}', NotJson),
        ("[]", TypeMismatch),
        ('{"resource_rules": []}', MissingField),
        ('{"metadata": {}, "resource_rules": []}', MissingField),
        ('{"metadata": {"schema_version": "1.0"}}', MissingField),
        (doc(resource_rules=[{"verb": "click_element", "selector": "a"}]), MissingField),
        (doc(resource_rules=[rule(allowed="yes")]), TypeMismatch),
        (doc(resource_rules=[rule(selector="a:hover")]), InvalidSelector),
        (doc(action_guidelines=[{"directive": "SHALL", "description": "x"}]), InvalidDirective),
        (doc(resource_rules=[rule(modifiers={"rate_limit": {"max_requests": 0, "window_seconds": 5}})]), InvalidRateLimit),
    ],
)
def test_strict_errors(raw, exc):
    with pytest.raises(exc):
        parse_manifest(raw)


def test_strict_error_carries_path_and_index():
    with pytest.raises(ParseError) as info:
        parse_manifest(doc(resource_rules=[rule(), rule(selector="a::after")]))
    assert info.value.path == "$.resource_rules[1].selector"
    assert info.value.index == 1
    assert info.value.code == "INVALID_SELECTOR"


def test_lenient_keeps_good_rules_and_positions():
    raw = doc(resource_rules=[rule(selector="a"), {"verb": 3}, rule(selector="b:hover"), rule(selector="#c")])
    m = parse_manifest(raw, strict=False)
    assert [r.source_index for r in m.resource_rules] == [0, 2, 3]
    assert m.rule(2).ast is None and m.rule(2).selector_error
    assert [d.code for d in m.parse_diagnostics] == ["TYPE_MISMATCH"]


def test_lenient_still_rejects_unrecoverable():
    for raw in (b"\xff", "nope", "[1]", '{"resource_rules": []}'):
        with pytest.raises(ParseError):
            parse_manifest(raw, strict=False)


def test_lenient_missing_rules_is_a_diagnostic():
    m = parse_manifest('{"metadata": {"schema_version": "1.0"}}', strict=False)
    assert m.resource_rules == ()
    assert [d.code for d in m.parse_diagnostics] == ["MISSING_FIELD"]


def test_unknown_fields_preserved():
    raw = doc(resource_rules=[rule(priority=2, modifiers={"cooldown": 5})], x_site={"a": [1]})
    out = manifest_to_dict(parse_manifest(raw))
    assert out["x_site"] == {"a": [1]}
    assert out["resource_rules"][0]["priority"] == 2
    assert out["resource_rules"][0]["modifiers"] == {"cooldown": 5}


def test_verbs():
    assert {v.value for v in Verb} == {
        "read_content", "click_element", "fill_input", "submit_form",
        "follow_link", "play_media", "download_file",
    }


def test_identity_tracks_content():
    a = parse_manifest(SAMPLE.read_bytes())
    b = parse_manifest(json.dumps(json.loads(SAMPLE.read_bytes())))  # different whitespace
    assert a.identity == b.identity
    c = parse_manifest(doc())
    assert a.identity != c.identity


@settings(max_examples=120, deadline=None)
@given(m=manifests())
def test_round_trip(m):
    once = serialize_manifest(m)
    parsed = parse_manifest(once)
    assert parsed == m
    assert serialize_manifest(parsed) == once
