"""Exception hierarchy shared by every stage of the pipeline."""

from __future__ import annotations


class CtiError(Exception):
    """Base class for all package errors."""


class InputError(CtiError):
    """Bad or unreadable user input (CLI exit code 1)."""


class UnreadableSource(InputError):
    pass


class SchemaViolation(InputError):
    def __init__(self, path: str, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = path
        self.reason = reason


class EmptyCatalog(InputError):
    pass


class EmptyCorpus(InputError):
    pass


class DuplicateId(InputError):
    def __init__(self, event_id: str):
        super().__init__(f"duplicate event id {event_id!r}")
        self.event_id = event_id


class UnknownTactic(InputError):
    def __init__(self, name: str):
        super().__init__(f"unknown tactic {name!r}")
        self.name = name


class DimensionMismatch(CtiError):
    pass


class ZeroNorm(CtiError):
    pass


class EmbedderFailure(CtiError):
    def __init__(self, technique_id: str, cause: Exception | None = None):
        super().__init__(f"embedder failed on {technique_id}: {cause}")
        self.technique_id = technique_id


class EmptyStore(CtiError):
    pass


class EmptyText(InputError):
    pass


class EmptyIntel(InputError):
    pass


# -- payload parsing -------------------------------------------------------

class PayloadError(CtiError):
    pass


class NoJsonFound(PayloadError):
    pass


class SchemaMismatch(PayloadError):
    def __init__(self, schema_id: str, expected_fields: tuple[str, ...], detail: str = ""):
        msg = f"{schema_id}: expected fields {list(expected_fields)}"
        super().__init__(f"{msg} ({detail})" if detail else msg)
        self.schema_id = schema_id
        self.expected_fields = expected_fields


# -- backend access (CLI exit code 2) ----------------------------------------

class GatewayError(CtiError):
    pass


class FixtureMissing(GatewayError):
    def __init__(self, key: str):
        super().__init__(f"no replay fixture for key {key}")
        self.key = key


class BackendError(GatewayError):
    def __init__(self, status: int | None, body: str):
        super().__init__(f"backend returned {status}: {body[:200]}")
        self.status = status
        self.body = body


class RetriesExhausted(GatewayError):
    def __init__(self, attempts: int, last: Exception | None = None):
        super().__init__(f"gave up after {attempts} attempts: {last}")
        self.attempts = attempts
        self.last = last


# -- rule language -------------------------------------------------------------

class RuleError(InputError):
    pass


class YamlSyntax(RuleError):
    def __init__(self, line: int, col: int, problem: str = ""):
        super().__init__(f"YAML syntax error at line {line}, column {col}: {problem}")
        self.line = line
        self.col = col


class MissingField(RuleError):
    def __init__(self, name: str):
        super().__init__(f"missing field {name!r}")
        self.name = name


class BadModifier(RuleError):
    def __init__(self, name: str):
        super().__init__(f"unknown value modifier {name!r}")
        self.name = name


class UnsupportedConstruct(RuleError):
    def __init__(self, name: str):
        super().__init__(f"unsupported construct {name!r}")
        self.name = name


class QuerySyntax(RuleError):
    def __init__(self, position: int, detail: str = ""):
        super().__init__(f"query syntax error at position {position}: {detail}")
        self.position = position


class IocExtractionError(GatewayError):
    """The model tier of IoC extraction failed; ``iocs`` holds the regex results."""

    def __init__(self, iocs: list, cause: Exception):
        super().__init__(f"model IoC tier failed ({cause}); {len(iocs)} regex IoCs kept")
        self.iocs = iocs
        self.cause = cause
