"""Sigma rule subset: parse, validate, canonical render and compile to Splunk.

Supported: field matchers with no modifier or one of ``contains``,
``startswith``, ``endswith``; scalar or list values; selections given as a
mapping (all matchers must hold) or a list of mappings (any must hold);
conditions built from selection names, ``and``, ``or``, ``not``,
parentheses, ``1 of``/``all of`` over ``them`` or a name pattern.

Other well-known modifiers parse but compile raises
:class:`UnsupportedConstruct`; unknown modifier names are rejected at parse
time. ``*`` and ``?`` in values are wildcards; there is no escape syntax.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence, Union

import yaml

from . import kernels
from .attack_kb import TechniqueCatalog
from .errors import BadModifier, MissingField, RuleError, UnsupportedConstruct, YamlSyntax
from .splunk import FIELD_RE, KEYWORDS, FieldEquals, FieldIn, Node, Not, SplunkQuery, conj, disj

SUPPORTED_MODIFIERS = ("contains", "startswith", "endswith")
KNOWN_MODIFIERS = frozenset(
    SUPPORTED_MODIFIERS
    + (
        "all", "re", "i", "m", "s", "base64", "base64offset", "cidr", "windash", "wide", "utf16", "utf16le",
        "utf16be", "lt", "lte", "gt", "gte", "exists", "expand", "fieldref", "cased", "minute", "hour", "day",
        "week", "month", "year",
    )
)
KNOWN_KEYS = (
    "title", "id", "related", "name", "taxonomy", "status", "description", "license", "author", "references",
    "date", "modified", "tags", "logsource", "detection", "fields", "falsepositives", "level", "scope",
)
ATTACK_TAG_RE = re.compile(r"attack\.(t\d{4}(?:\.\d{3})?)", re.I)


class InvalidRule(RuleError):
    """Compilation was asked for a rule that does not validate."""

    def __init__(self, diagnostics: Sequence["Diagnostic"]):
        super().__init__("; ".join(str(d) for d in diagnostics))
        self.diagnostics = list(diagnostics)


# -- model -------------------------------------------------------------------------

@dataclass(frozen=True)
class Matcher:
    field: str
    modifiers: tuple[str, ...]
    values: tuple[str, ...]

    @property
    def modifier(self) -> str:
        return self.modifiers[0] if len(self.modifiers) == 1 else ("none" if not self.modifiers else "|".join(self.modifiers))

    @property
    def key(self) -> str:
        return "|".join((self.field, *self.modifiers))


@dataclass(frozen=True)
class Selection:
    """``groups`` holds one matcher tuple per alternative (list form) or a
    single tuple (mapping form). ``keywords`` holds bare keyword lists."""

    name: str
    groups: tuple[tuple[Matcher, ...], ...] = ()
    list_form: bool = False
    keywords: tuple[str, ...] = ()


@dataclass(frozen=True)
class LogSource:
    category: str | None = None
    product: str | None = None
    service: str | None = None
    extra: tuple[tuple[str, Any], ...] = ()


@dataclass(frozen=True)
class SigmaRule:
    title: str
    logsource: LogSource
    selections: tuple[Selection, ...]
    condition: Any  # str normally; kept raw so validation can report other shapes
    description: str = ""
    author: str = ""
    falsepositives: tuple[str, ...] | None = None
    tags: tuple[str, ...] = ()
    extra: tuple[tuple[str, Any], ...] = ()
    detection_extra: tuple[tuple[str, Any], ...] = ()
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def selection(self, name: str) -> Selection | None:
        for s in self.selections:
            if s.name == name:
                return s
        return None

    @property
    def selection_names(self) -> list[str]:
        return [s.name for s in self.selections]

    def attack_tags(self) -> list[str]:
        return [m.group(1).upper() for t in self.tags if (m := ATTACK_TAG_RE.fullmatch(t))]


@dataclass(frozen=True)
class Diagnostic:
    code: str
    subject: str = ""
    message: str = ""

    def __str__(self) -> str:
        text = f"{self.code}({self.subject!r})" if self.subject else self.code
        return f"{text}: {self.message}" if self.message else text


# -- parsing ---------------------------------------------------------------------------

_MISSING_SPACE_RE = re.compile(r"^(\s*)([A-Za-z_][\w|.\-]*):(?=[^\s/])", re.M)


def _load_yaml(text: str) -> tuple[Any, list[str]]:
    try:
        return yaml.safe_load(text), []
    except yaml.YAMLError as first:
        repaired = _MISSING_SPACE_RE.sub(r"\1\2: ", text)
        if repaired != text:
            try:
                return yaml.safe_load(repaired), ["inserted missing space after a mapping key"]
            except yaml.YAMLError:
                pass
        mark = getattr(first, "problem_mark", None)
        line, col = (mark.line + 1, mark.column + 1) if mark else (0, 0)
        raise YamlSyntax(line, col, getattr(first, "problem", None) or str(first)) from first


def _scalar(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        raise UnsupportedConstruct("null value")
    if isinstance(value, (int, float, str)):
        return str(value)
    raise UnsupportedConstruct(f"value of type {type(value).__name__}")


def _matcher(key: Any, value: Any) -> Matcher:
    if not isinstance(key, str) or not key:
        raise MissingField("field name")
    fname, *mods = key.split("|")
    for m in mods:
        if m not in KNOWN_MODIFIERS:
            raise BadModifier(m)
    if isinstance(value, list):
        values = tuple(_scalar(v) for v in value)
    else:
        values = (_scalar(value),)
    return Matcher(fname, tuple(mods), values)


def _selection(name: str, body: Any) -> Selection:
    if isinstance(body, Mapping):
        return Selection(name, (tuple(_matcher(k, v) for k, v in body.items()),))
    if isinstance(body, list) and body and all(isinstance(b, Mapping) for b in body):
        return Selection(name, tuple(tuple(_matcher(k, v) for k, v in b.items()) for b in body), list_form=True)
    if isinstance(body, list):
        return Selection(name, (), keywords=tuple(_scalar(v) for v in body))
    if isinstance(body, str):
        return Selection(name, (), keywords=(body,))
    raise UnsupportedConstruct(f"selection {name!r} of type {type(body).__name__}")


def _str_list(value: Any) -> tuple[str, ...]:
    if value is None:
        return ()
    if isinstance(value, list):
        return tuple(_scalar(v) for v in value)
    return (_scalar(value),)


def parse_sigma(yaml_text: str) -> SigmaRule:
    """Parse one Sigma document into a :class:`SigmaRule`."""
    doc, warnings = _load_yaml(yaml_text)
    if not isinstance(doc, Mapping):
        raise YamlSyntax(1, 1, "document is not a mapping")
    for required in ("title", "logsource", "detection"):
        if doc.get(required) in (None, ""):
            raise MissingField(required)
    detection = doc["detection"]
    if not isinstance(detection, Mapping):
        raise MissingField("detection")
    if detection.get("condition") in (None, ""):
        raise MissingField("condition")
    ls = doc["logsource"]
    if not isinstance(ls, Mapping):
        raise MissingField("logsource")
    logsource = LogSource(
        *(None if ls.get(k) is None else _scalar(ls.get(k)) for k in ("category", "product", "service")),
        extra=tuple((k, v) for k, v in ls.items() if k not in ("category", "product", "service")),
    )
    selections = []
    detection_extra = []
    for name, body in detection.items():
        if name == "condition":
            continue
        if name == "timeframe":
            detection_extra.append((name, body))
            continue
        selections.append(_selection(str(name), body))
    extra = []
    for key, value in doc.items():
        if key in ("title", "logsource", "detection", "description", "author", "falsepositives", "tags"):
            continue
        if key not in KNOWN_KEYS:
            warnings.append(f"unknown top-level key {key!r}")
        extra.append((key, value))
    fps = doc.get("falsepositives")
    return SigmaRule(
        title=_scalar(doc["title"]),
        logsource=logsource,
        selections=tuple(selections),
        condition=detection["condition"],
        description="" if doc.get("description") is None else _scalar(doc["description"]),
        author="" if doc.get("author") is None else _scalar(doc["author"]),
        falsepositives=None if fps is None else _str_list(fps),
        tags=_str_list(doc.get("tags")),
        extra=tuple(extra),
        detection_extra=tuple(detection_extra),
        warnings=tuple(warnings),
    )


# -- condition grammar -------------------------------------------------------------

@dataclass(frozen=True)
class CRef:
    name: str


@dataclass(frozen=True)
class CQuant:
    quantifier: str  # "1" or "all"
    pattern: str  # "them" or a name pattern


@dataclass(frozen=True)
class CNot:
    item: "Cond"


@dataclass(frozen=True)
class CAnd:
    items: tuple["Cond", ...]


@dataclass(frozen=True)
class COr:
    items: tuple["Cond", ...]


Cond = Union[CRef, CQuant, CNot, CAnd, COr]


class ConditionSyntax(RuleError):
    def __init__(self, position: int, detail: str):
        super().__init__(f"condition syntax error at {position}: {detail}")
        self.position = position
        self.detail = detail


_COND_TOKEN = re.compile(r"\s*(?:(?P<p>[()])|(?P<pipe>\|)|(?P<w>[^\s()|]+))")


def _cond_tokens(text: str) -> list[tuple[str, int]]:
    out = []
    pos = 0
    while pos < len(text):
        m = _COND_TOKEN.match(text, pos)
        if not m or m.end() == pos:
            break
        if m.group("pipe"):
            raise UnsupportedConstruct("aggregation condition")
        tok = m.group("p") or m.group("w")
        if tok:
            out.append((tok, m.start(m.lastgroup)))
        pos = m.end()
    return out


def parse_condition(text: str) -> Cond:
    toks = _cond_tokens(text)
    i = 0

    def peek() -> str:
        return toks[i][0] if i < len(toks) else ""

    def at() -> int:
        return toks[i][1] if i < len(toks) else len(text)

    def low() -> str:
        return peek().lower()

    def or_expr() -> Cond:
        nonlocal i
        items = [and_expr()]
        while low() == "or":
            i += 1
            items.append(and_expr())
        return items[0] if len(items) == 1 else COr(tuple(items))

    def and_expr() -> Cond:
        nonlocal i
        items = [not_expr()]
        while low() == "and":
            i += 1
            items.append(not_expr())
        return items[0] if len(items) == 1 else CAnd(tuple(items))

    def not_expr() -> Cond:
        nonlocal i
        if low() == "not":
            i += 1
            return CNot(not_expr())
        return primary()

    def primary() -> Cond:
        nonlocal i
        tok, pos = peek(), at()
        if not tok:
            raise ConditionSyntax(pos, "unexpected end of condition")
        if tok == "(":
            i += 1
            node = or_expr()
            if peek() != ")":
                raise ConditionSyntax(at(), "missing ')'")
            i += 1
            return node
        if tok == ")" or tok.lower() in ("and", "or", "of"):
            raise ConditionSyntax(pos, f"unexpected {tok!r}")
        if i + 1 < len(toks) and toks[i + 1][0].lower() == "of":
            quant = tok.lower()
            if quant not in ("1", "all"):
                raise UnsupportedConstruct(f"{tok} of")
            if i + 2 >= len(toks) or toks[i + 2][0] in ("(", ")"):
                raise ConditionSyntax(at(), "'of' needs 'them' or a name pattern")
            target = toks[i + 2][0]
            i += 3
            return CQuant(quant, "them" if target.lower() == "them" else target)
        if tok.lower() == "near":
            raise UnsupportedConstruct("near")
        i += 1
        return CRef(tok)

    node = or_expr()
    if i != len(toks):
        raise ConditionSyntax(at(), f"unexpected {peek()!r}")
    return node


def _quant_targets(pattern: str, names: Sequence[str]) -> list[str]:
    if pattern == "them":
        return [n for n in names if not n.startswith("_")]
    return [n for n in names if kernels.wildcard_match(pattern, n)]


def condition_refs(cond: Cond) -> list[tuple[str, str]]:
    """(kind, name) pairs: ("ref", name) or ("pattern", pattern)."""
    if isinstance(cond, CRef):
        return [("ref", cond.name)]
    if isinstance(cond, CQuant):
        return [("pattern", cond.pattern)]
    if isinstance(cond, CNot):
        return condition_refs(cond.item)
    return [r for it in cond.items for r in condition_refs(it)]


# -- validation ------------------------------------------------------------------------

def _matcher_problems(m: Matcher, allowed_fields) -> list[Diagnostic]:
    out = []
    if not FIELD_RE.fullmatch(m.field) or m.field in KEYWORDS:
        out.append(Diagnostic("InvalidFieldName", m.field))
    if allowed_fields is not None and m.field not in allowed_fields:
        out.append(Diagnostic("DisallowedField", m.field, f"allowed: {', '.join(sorted(allowed_fields))}"))
    if len(m.modifiers) > 1 or (m.modifiers and m.modifiers[0] not in SUPPORTED_MODIFIERS):
        out.append(Diagnostic("UnsupportedModifier", m.key))
    if not m.values:
        out.append(Diagnostic("EmptyValues", m.key))
    for v in m.values:
        if "\n" in v or "\r" in v:
            out.append(Diagnostic("NewlineInValue", m.key))
            break
    return out


def validate_sigma(
    rule: SigmaRule,
    catalog: TechniqueCatalog | None = None,
    allowed_fields: Sequence[str] | None = None,
) -> list[Diagnostic]:
    """Every problem that prevents the rule from being accepted; empty when valid."""
    diags: list[Diagnostic] = []
    if not str(rule.title).strip():
        diags.append(Diagnostic("MissingTitle"))
    if any(k == "id" for k, _ in rule.extra):
        diags.append(Diagnostic("IdPresent", "id", "generated rules must not carry an id"))
    if not rule.selections:
        diags.append(Diagnostic("NoSelection"))
    for key, _ in rule.detection_extra:
        diags.append(Diagnostic("UnsupportedConstruct", key))
    allowed = None if allowed_fields is None else frozenset(allowed_fields)
    for sel in rule.selections:
        if sel.keywords:
            diags.append(Diagnostic("UnsupportedConstruct", sel.name, "keyword selections are not supported"))
        if not sel.keywords and not any(sel.groups):
            diags.append(Diagnostic("EmptySelection", sel.name))
        for group in sel.groups:
            for m in group:
                diags.extend(_matcher_problems(m, allowed))
    if not isinstance(rule.condition, str) or not rule.condition.strip():
        diags.append(Diagnostic("ConditionSyntax", "", "condition must be a single non-empty string"))
    else:
        try:
            cond = parse_condition(rule.condition)
        except ConditionSyntax as exc:
            diags.append(Diagnostic("ConditionSyntax", rule.condition, str(exc)))
        except UnsupportedConstruct as exc:
            diags.append(Diagnostic("UnsupportedConstruct", exc.name))
        else:
            names = rule.selection_names
            for kind, name in condition_refs(cond):
                if kind == "ref" and name not in names:
                    diags.append(Diagnostic("UnresolvedReference", name))
                elif kind == "pattern" and not _quant_targets(name, names):
                    diags.append(Diagnostic("UnresolvedReference", name))
    if catalog is not None:
        for tag in rule.tags:
            m = ATTACK_TAG_RE.fullmatch(tag)
            if m and m.group(1).upper() not in catalog:
                diags.append(Diagnostic("UnknownTechniqueTag", tag))
    return diags


# -- canonical emitter -----------------------------------------------------------------

class _Dumper(yaml.SafeDumper):
    pass


def _str_presenter(dumper, data):
    style = "|" if "\n" in data else None
    return dumper.represent_scalar("tag:yaml.org,2002:str", data, style=style)


_Dumper.add_representer(str, _str_presenter)


def _selection_doc(sel: Selection) -> Any:
    if sel.keywords:
        return list(sel.keywords)

    def group_doc(group):
        return {m.key: (m.values[0] if len(m.values) == 1 else list(m.values)) for m in group}

    if sel.list_form:
        return [group_doc(g) for g in sel.groups]
    return group_doc(sel.groups[0]) if sel.groups else {}


def sigma_document(rule: SigmaRule) -> dict:
    doc: dict[str, Any] = {"title": rule.title}
    extra = dict(rule.extra)
    for key in ("id", "status"):
        if key in extra:
            doc[key] = extra.pop(key)
    if rule.description:
        doc["description"] = rule.description
    if rule.author:
        doc["author"] = rule.author
    for key in ("references", "date", "modified"):
        if key in extra:
            doc[key] = extra.pop(key)
    if rule.tags:
        doc["tags"] = list(rule.tags)
    ls = {k: getattr(rule.logsource, k) for k in ("category", "product", "service") if getattr(rule.logsource, k) is not None}
    ls.update(dict(rule.logsource.extra))
    doc["logsource"] = ls
    detection: dict[str, Any] = {s.name: _selection_doc(s) for s in rule.selections}
    detection.update(dict(rule.detection_extra))
    detection["condition"] = rule.condition
    doc["detection"] = detection
    if rule.falsepositives is not None:
        doc["falsepositives"] = list(rule.falsepositives)
    doc.update(extra)
    return doc


def render_sigma(rule: SigmaRule) -> str:
    """Canonical YAML: fixed key order, block style, two-space indent."""
    return yaml.dump(
        sigma_document(rule), Dumper=_Dumper, sort_keys=False, default_flow_style=False, allow_unicode=True, width=4096
    )


# -- compilation ----------------------------------------------------------------------

def matcher_pattern(modifier: str, value: str) -> str:
    """Splunk wildcard pattern for one Sigma value; stars are never doubled."""
    if modifier in ("contains", "endswith") and not value.startswith("*"):
        value = "*" + value
    if modifier in ("contains", "startswith") and not value.endswith("*"):
        value = value + "*"
    return value


def compile_matcher(m: Matcher) -> Node:
    if len(m.modifiers) > 1 or (m.modifiers and m.modifiers[0] not in SUPPORTED_MODIFIERS):
        raise UnsupportedConstruct(f"modifier {m.key}")
    mod = m.modifiers[0] if m.modifiers else "none"
    patterns = tuple(matcher_pattern(mod, v) for v in m.values)
    return FieldEquals(m.field, patterns[0]) if len(patterns) == 1 else FieldIn(m.field, patterns)


def compile_selection(sel: Selection) -> Node:
    if sel.keywords:
        raise UnsupportedConstruct(f"keyword selection {sel.name}")
    return disj(conj(compile_matcher(m) for m in group) for group in sel.groups)


def _compile_cond(cond: Cond, compiled: Mapping[str, Node], names: Sequence[str]) -> Node:
    if isinstance(cond, CRef):
        return compiled[cond.name]
    if isinstance(cond, CQuant):
        nodes = [compiled[n] for n in _quant_targets(cond.pattern, names)]
        return disj(nodes) if cond.quantifier == "1" else conj(nodes)
    if isinstance(cond, CNot):
        return Not(_compile_cond(cond.item, compiled, names))
    subs = [_compile_cond(c, compiled, names) for c in cond.items]
    return conj(subs) if isinstance(cond, CAnd) else disj(subs)


def compile_to_splunk(rule: SigmaRule) -> SplunkQuery:
    diags = validate_sigma(rule)
    for d in diags:
        if d.code in ("UnsupportedConstruct", "UnsupportedModifier"):
            raise UnsupportedConstruct(d.subject or d.message)
    if diags:
        raise InvalidRule(diags)
    compiled = {s.name: compile_selection(s) for s in rule.selections}
    ast = _compile_cond(parse_condition(rule.condition), compiled, rule.selection_names)
    return SplunkQuery.from_ast(ast)


# -- reference semantics ------------------------------------------------------------------

def _value_regex(modifier: str, value: str) -> re.Pattern:
    body = "".join(".*" if c == "*" else "." if c == "?" else re.escape(c) for c in value.lower())
    if modifier == "contains":
        body = f".*{body}.*"
    elif modifier == "startswith":
        body = f"{body}.*"
    elif modifier == "endswith":
        body = f".*{body}"
    return re.compile(body, re.S)


def sigma_match(rule: SigmaRule, fields: Mapping[str, str]) -> bool:
    """Direct interpreter of the rule's detection semantics.

    Shares only the condition parser with the compiler: values become regular
    expressions and the condition tree is evaluated directly.
    """

    def matcher_holds(m: Matcher) -> bool:
        v = fields.get(m.field)
        if v is None:
            return False
        mod = m.modifiers[0] if m.modifiers else "none"
        return any(_value_regex(mod, val).fullmatch(v.lower()) for val in m.values)

    def selection_holds(sel: Selection) -> bool:
        return any(all(matcher_holds(m) for m in group) for group in sel.groups)

    names = rule.selection_names

    def targets(pattern: str) -> list[str]:
        if pattern == "them":
            return [n for n in names if not n.startswith("_")]
        rx = "".join(".*" if c == "*" else "." if c == "?" else re.escape(c) for c in pattern)
        return [n for n in names if re.fullmatch(rx, n, re.S)]

    def holds(c: Cond) -> bool:
        if isinstance(c, CRef):
            return selection_holds(rule.selection(c.name))
        if isinstance(c, CQuant):
            results = [selection_holds(rule.selection(n)) for n in targets(c.pattern)]
            return any(results) if c.quantifier == "1" else all(results)
        if isinstance(c, CNot):
            return not holds(c.item)
        if isinstance(c, CAnd):
            return all(holds(i) for i in c.items)
        return any(holds(i) for i in c.items)

    return holds(parse_condition(rule.condition))
