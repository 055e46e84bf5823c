from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctirules.errors import NoJsonFound, PayloadError, SchemaMismatch
from ctirules.payloads import balanced_objects, parse_json_payload


def test_fenced_judgment():
    v = parse_json_payload('```json\n{"if_exist": "YES", "reason": "R"}\n```', "judgment")
    assert v.yes and v.answer == "YES" and v.reason == "R"


def test_empty_ioc_list():
    assert parse_json_payload('{"ioc": []}', "ioc_list") == []


def test_no_json():
    with pytest.raises(NoJsonFound):
        parse_json_payload("no json here", "ioc_list")


def test_prose_around_object():
    text = 'Sure! Here\'s the answer: {"technique": ["Impact, Inhibit System Recovery"]} hope it helps {'
    assert parse_json_payload(text, "technique_list") == ["Impact, Inhibit System Recovery"]


def test_schema_mismatch():
    with pytest.raises(SchemaMismatch):
        parse_json_payload('{"ioc": "1.2.3.4"}', "ioc_list")
    with pytest.raises(SchemaMismatch):
        parse_json_payload('{"if_exist": "MAYBE", "reason": "x"}', "judgment")
    with pytest.raises(SchemaMismatch):
        parse_json_payload('{"reason": "x"}', "rule_relevance")


def test_verdict_case_insensitive():
    assert parse_json_payload('{"reason": "r", "relevant": "yes"}', "rule_relevance").yes


def test_nested_objects_first_outer():
    text = '{"procedure": ["1. a {b}"], "meta": {"x": 1}}'
    assert parse_json_payload(text, "procedure_list") == ["1. a {b}"]


def test_triples():
    assert parse_json_payload('{"triples": [["APT1", "installs", "WEBC2"]]}', "triple_list") == [("APT1", "installs", "WEBC2")]
    with pytest.raises(SchemaMismatch):
        parse_json_payload('{"triples": [["a", "b"]]}', "triple_list")


def test_unknown_schema():
    with pytest.raises(ValueError):
        parse_json_payload("{}", "nope")


def test_balanced_objects_linear_shapes():
    assert balanced_objects('a {"x": "}"} b {}') == ['{"x": "}"}', "{}"]
    assert balanced_objects("{{{") == []
    # deep nesting does not blow up
    deep = "{" * 5000 + "}" * 5000
    assert len(balanced_objects(deep)) == 5000


@settings(max_examples=300, deadline=None)
@given(st.text(alphabet='{}[]":,\\ abcYESNO0123456789`\n', max_size=200), st.sampled_from(["ioc_list", "technique_list", "judgment", "procedure_list", "rule_relevance", "triple_list"]))
def test_adversarial_input_gives_typed_error(text, schema):
    try:
        parse_json_payload(text, schema)
    except PayloadError:
        pass
