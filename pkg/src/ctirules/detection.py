"""Detection harness: run compiled queries over events and score the results."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import DuplicateId, QuerySyntax, SchemaViolation, UnreadableSource
from .splunk import Node, SplunkQuery, compile_predicate, parse_splunk_query

LABELS = ("benign", "malicious")


@dataclass(frozen=True)
class LogEvent:
    event_id: str
    fields: Mapping[str, str]
    label: str = "benign"
    truth_tags: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.fields:
            raise ValueError("event fields must be non-empty")
        if self.label not in LABELS:
            raise ValueError(f"label must be one of {LABELS}")


def _event_from_obj(obj, where: str) -> LogEvent:
    if not isinstance(obj, dict):
        raise SchemaViolation(where, "expected a JSON object")
    eid, fields, label = obj.get("event_id"), obj.get("fields"), obj.get("label", "benign")
    if not isinstance(eid, str) or not eid:
        raise SchemaViolation(where, "missing 'event_id'")
    if not isinstance(fields, dict) or not fields:
        raise SchemaViolation(where, "missing or empty 'fields'")
    if label not in LABELS:
        raise SchemaViolation(where, f"label must be one of {LABELS}")
    tags = obj.get("truth_tags") or []
    if not isinstance(tags, list) or not all(isinstance(t, str) for t in tags):
        raise SchemaViolation(where, "'truth_tags' must be a list of strings")
    norm = {}
    for k, v in fields.items():
        if isinstance(v, (dict, list)) or v is None:
            raise SchemaViolation(where, f"field {k!r} must be a scalar")
        norm[str(k)] = v if isinstance(v, str) else json.dumps(v)
    return LogEvent(eid, norm, label, tuple(tags))


def load_events(path: str | Path) -> list[LogEvent]:
    """JSON-lines events; ids must be unique."""
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise UnreadableSource(f"{path}: {exc}") from exc
    events: list[LogEvent] = []
    seen: set[str] = set()
    for no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except ValueError as exc:
            raise SchemaViolation(f"{path}:{no}", f"invalid JSON: {exc}") from None
        ev = _event_from_obj(obj, f"{path}:{no}")
        if ev.event_id in seen:
            raise DuplicateId(ev.event_id)
        seen.add(ev.event_id)
        events.append(ev)
    return events


def event_to_json(ev: LogEvent) -> dict:
    return {"event_id": ev.event_id, "fields": dict(ev.fields), "label": ev.label, "truth_tags": list(ev.truth_tags)}


def match_event(ast: Node, event: LogEvent | Mapping[str, str]) -> bool:
    fields = event.fields if isinstance(event, LogEvent) else event
    return compile_predicate(ast)(fields)


@dataclass(frozen=True)
class DetectionReport:
    per_rule: dict[str, tuple[str, ...]]
    per_event: dict[str, tuple[str, ...]]

    def to_json(self) -> dict:
        return {
            "per_rule": {k: list(v) for k, v in self.per_rule.items()},
            "per_event": {k: list(v) for k, v in self.per_event.items()},
        }


class RuleQueryError(QuerySyntax):
    def __init__(self, slug: str, cause: QuerySyntax):
        super().__init__(cause.position, f"rule {slug}: {cause}")
        self.slug = slug


def run_detection(
    rules: Mapping[str, Node | SplunkQuery | str] | Sequence[tuple[str, Node | SplunkQuery | str]],
    events: Sequence[LogEvent],
) -> DetectionReport:
    """Exhaustive rule x event matching.

    ``per_event`` lists every event id, with an empty tuple when no rule fired.
    """
    items = list(rules.items()) if isinstance(rules, Mapping) else list(rules)
    predicates = []
    for slug, q in items:
        if isinstance(q, str):
            try:
                q = parse_splunk_query(q)
            except QuerySyntax as exc:
                raise RuleQueryError(slug, exc) from exc
        elif isinstance(q, SplunkQuery):
            q = q.ast
        predicates.append((slug, compile_predicate(q)))
    per_rule = {slug: [] for slug, _ in predicates}
    per_event = {ev.event_id: [] for ev in events}
    for ev in events:
        for slug, pred in predicates:
            if pred(ev.fields):
                per_rule[slug].append(ev.event_id)
                per_event[ev.event_id].append(slug)
    return DetectionReport(
        {k: tuple(v) for k, v in per_rule.items()}, {k: tuple(v) for k, v in per_event.items()}
    )


# -- metrics ------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalReport:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int) -> "EvalReport":
        """Metrics with the empty-set policy: nothing predicted and nothing
        expected scores 1 across the board; a single empty denominator
        scores that metric 0."""
        if min(tp, fp, fn) < 0:
            raise ValueError("counts must be non-negative")
        if tp + fp == 0 and tp + fn == 0:
            return cls(tp, fp, fn, 1.0, 1.0, 1.0)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        return cls(tp, fp, fn, precision, recall, f1_score(precision, recall))

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in ("tp", "fp", "fn", "precision", "recall", "f1")}


def f1_score(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def evaluate_sets(predicted: Iterable[str], truth: Iterable[str]) -> EvalReport:
    p, t = set(predicted), set(truth)
    return EvalReport.from_counts(len(p & t), len(p - t), len(t - p))


def evaluate_detection(report: DetectionReport, events: Sequence[LogEvent]) -> EvalReport:
    """Event-level scores: an event counts as flagged when any rule matched it."""
    predicted = {ev.event_id for ev in events if report.per_event.get(ev.event_id)}
    truth = {ev.event_id for ev in events if ev.label == "malicious"}
    return evaluate_sets(predicted, truth)


def macro_average(reports: Sequence[EvalReport]) -> tuple[float, float, float]:
    """Mean precision, mean recall, and F1 of those two means."""
    if not reports:
        raise ValueError("no reports to average")
    p = sum(r.precision for r in reports) / len(reports)
    r = sum(r.recall for r in reports) / len(reports)
    return p, r, f1_score(p, r)


# -- tables ---------------------------------------------------------------------------

def fmt_metric(x: float) -> str:
    """1.00 and 0.00 for the exact endpoints, three decimals otherwise."""
    if x == 1.0:
        return "1.00"
    if x == 0.0:
        return "0.00"
    return f"{x:.3f}"


def render_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    cols = [header, *rows]
    widths = [max(len(str(r[i])) for r in cols) for i in range(len(header))]

    def line(r):
        return "  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w) for i, (c, w) in enumerate(zip(r, widths)))

    return "\n".join([line(header), "  ".join("-" * w for w in widths), *(line(r) for r in rows)]) + "\n"


def render_eval_rows(rows: Sequence[tuple[str, EvalReport]]) -> str:
    """One line per report: name, FN, FP, P, R, F1."""
    header = ("Report", "FN", "FP", "P", "R", "F1")
    body = [(name, str(r.fn), str(r.fp), fmt_metric(r.precision), fmt_metric(r.recall), fmt_metric(r.f1)) for name, r in rows]
    return render_table(header, body)


@dataclass(frozen=True)
class AblationRow:
    name: str
    no_ttp: EvalReport
    ttp: EvalReport
    attempts_no_ttp: int
    attempts_ttp: int


def kept_queries(run) -> dict[str, SplunkQuery]:
    """Compiled queries of the rules a run kept, keyed by draft position."""
    return {f"{run.report_id}-{o.draft_index}": o.repair.query for o in run.kept()}


def run_ablation(
    name: str,
    report_text: str,
    intel,
    events: Sequence[LogEvent],
    gateway,
    **rule_kw,
) -> AblationRow:
    """Generate rules with and without the TTP block and score both over ``events``.

    The attempts columns count repair calls summed over every draft.
    """
    from .rulegen import rules_for_report

    scores, attempts = [], []
    for use_ttp in (False, True):
        run = rules_for_report(report_text, intel, gateway, use_ttp=use_ttp, **rule_kw)
        scores.append(evaluate_detection(run_detection(kept_queries(run), events), events))
        attempts.append(run.total_repairs)
    return AblationRow(name, scores[0], scores[1], attempts[0], attempts[1])


def render_ablation_table(rows: Sequence[AblationRow]) -> str:
    header = ("TTPs", "P NoTTP", "P TTP", "R NoTTP", "R TTP", "F1 NoTTP", "F1 TTP", "Att NoTTP", "Att TTP")
    body = [
        (
            r.name,
            fmt_metric(r.no_ttp.precision),
            fmt_metric(r.ttp.precision),
            fmt_metric(r.no_ttp.recall),
            fmt_metric(r.ttp.recall),
            fmt_metric(r.no_ttp.f1),
            fmt_metric(r.ttp.f1),
            str(r.attempts_no_ttp),
            str(r.attempts_ttp),
        )
        for r in rows
    ]
    return render_table(header, body)
