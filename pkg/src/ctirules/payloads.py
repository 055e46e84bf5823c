"""Extraction and validation of JSON payloads embedded in model output."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

from .errors import NoJsonFound, SchemaMismatch

_FENCE_RE = re.compile(r"```[ \t]*([A-Za-z0-9_-]*)[ \t]*\r?\n(.*?)```", re.DOTALL)


@dataclass(frozen=True)
class Verdict:
    answer: str  # "YES" or "NO"
    reason: str

    @property
    def yes(self) -> bool:
        return self.answer == "YES"


SCHEMAS: dict[str, tuple[str, ...]] = {
    "ioc_list": ("ioc",),
    "technique_list": ("technique",),
    "judgment": ("if_exist", "reason"),
    "procedure_list": ("procedure",),
    "rule_relevance": ("reason", "relevant"),
    "triple_list": ("triples",),
}


def strip_fences(text: str) -> list[str]:
    """Candidate regions: fenced block bodies first, then the raw text."""
    regions = [m.group(2) for m in _FENCE_RE.finditer(text)]
    regions.append(text)
    return regions


def balanced_objects(text: str) -> list[str]:
    """Every balanced ``{...}`` span ordered by start offset (single linear pass).

    Strings are only tracked inside braces so apostrophes in prose do not
    derail the scan.
    """
    stack: list[int] = []
    spans: list[tuple[int, int]] = []
    in_str = False
    esc = False
    for j, ch in enumerate(text):
        if in_str:
            if esc:
                esc = False
            elif ch == "\\":
                esc = True
            elif ch == '"':
                in_str = False
        elif ch == "{":
            stack.append(j)
        elif ch == "}":
            if stack:
                spans.append((stack.pop(), j))
        elif ch == '"' and stack:
            in_str = True
    spans.sort()
    return [text[a : b + 1] for a, b in spans]


def first_json_object(text: str) -> dict:
    for region in strip_fences(text):
        for candidate in balanced_objects(region):
            try:
                value = json.loads(candidate)
            except (ValueError, RecursionError):
                continue
            if isinstance(value, dict):
                return value
    raise NoJsonFound("no JSON object in model output")


def _string_list(obj: dict, key: str, schema_id: str) -> list[str]:
    value = obj.get(key)
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise SchemaMismatch(schema_id, SCHEMAS[schema_id], f"{key!r} must be a list of strings")
    return list(value)


def _verdict(obj: dict, key: str, schema_id: str) -> Verdict:
    answer = obj.get(key)
    reason = obj.get("reason")
    if not isinstance(answer, str) or not isinstance(reason, str):
        raise SchemaMismatch(schema_id, SCHEMAS[schema_id], "answer and reason must be strings")
    answer = answer.strip().upper()
    if answer not in ("YES", "NO"):
        raise SchemaMismatch(schema_id, SCHEMAS[schema_id], f"{key!r} must be YES or NO")
    return Verdict(answer, reason)


def parse_json_payload(text: str, schema_id: str):
    """Return the typed value for ``schema_id`` found in ``text``.

    ``ioc_list``, ``technique_list`` and ``procedure_list`` give lists of
    strings; ``judgment`` and ``rule_relevance`` give a :class:`Verdict`;
    ``triple_list`` gives a list of ``(entity, verb, entity)`` tuples.
    Only fence stripping and first-object extraction are attempted.
    """
    if schema_id not in SCHEMAS:
        raise ValueError(f"unknown schema {schema_id!r}")
    if not isinstance(text, str):
        raise NoJsonFound("model output is not text")
    obj = first_json_object(text)
    if schema_id == "ioc_list":
        return _string_list(obj, "ioc", schema_id)
    if schema_id == "technique_list":
        return _string_list(obj, "technique", schema_id)
    if schema_id == "procedure_list":
        return _string_list(obj, "procedure", schema_id)
    if schema_id == "judgment":
        return _verdict(obj, "if_exist", schema_id)
    if schema_id == "rule_relevance":
        return _verdict(obj, "relevant", schema_id)
    triples = obj.get("triples")
    if not isinstance(triples, list):
        raise SchemaMismatch(schema_id, SCHEMAS[schema_id], "'triples' must be a list")
    out = []
    for t in triples:
        if not (isinstance(t, list) and len(t) == 3 and all(isinstance(x, str) for x in t)):
            raise SchemaMismatch(schema_id, SCHEMAS[schema_id], "each triple is [entity, verb, entity]")
        out.append(tuple(t))
    return out
