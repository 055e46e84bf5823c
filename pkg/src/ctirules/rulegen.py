"""Rule drafting, bounded repair, relevance judgment and bundle output."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .attack_kb import TechniqueCatalog
from .errors import GatewayError, PayloadError, RuleError
from .extraction import AttackIntel
from .payloads import parse_json_payload
from .prompts import FIELD_STUDY_FIELDS, repair_prompt, rule_judge_prompt, rule_prompt
from .sigma import SigmaRule, compile_to_splunk, parse_sigma, render_sigma, validate_sigma
from .splunk import SplunkQuery

log = logging.getLogger(__name__)

MAX_ATTEMPTS = 30
DEFAULT_MAX_DRAFTS = 20

_FENCE_RE = re.compile(r"```[ \t]*([A-Za-z0-9_-]*)[ \t]*\r?\n(.*?)```", re.S)
_DOC_SEP_RE = re.compile(r"^---[ \t]*$", re.M)


def split_yaml_documents(text: str) -> list[str]:
    """Fenced block bodies if any exist, else the whole text; each split on ``---`` lines."""
    regions = [m.group(2) for m in _FENCE_RE.finditer(text)] or [text]
    docs = []
    for region in regions:
        for doc in _DOC_SEP_RE.split(region):
            doc = doc.strip("\n")
            if doc.strip():
                docs.append(doc + "\n")
    return docs


@dataclass
class RuleDrafts:
    drafts: list[str]
    overflow: int = 0
    prompt_had_ttps: bool = True


def generate_rules(
    report_text: str,
    intel: AttackIntel | None,
    gateway,
    *,
    use_ttp: bool = True,
    field_study: bool = False,
    max_drafts: int = DEFAULT_MAX_DRAFTS,
) -> RuleDrafts:
    """Ask for Sigma rules; the TTP block is left out when there is none or ``use_ttp`` is off."""
    ttp = intel.ttp_block() if (use_ttp and intel is not None and intel.techniques) else None
    system, messages = rule_prompt(report_text, ttp, field_study=field_study)
    docs = split_yaml_documents(gateway.complete(system, messages, None))
    overflow = max(0, len(docs) - max_drafts)
    return RuleDrafts(docs[:max_drafts], overflow, ttp is not None)


# -- repair -----------------------------------------------------------------------

@dataclass
class RepairTrace:
    attempts: list[tuple[str, list[str]]] = field(default_factory=list)
    outcome: str = "discarded"

    @property
    def repairs(self) -> int:
        """Attempts after the first draft, i.e. gateway calls spent on fixes."""
        return max(0, len(self.attempts) - 1)

    def to_json(self) -> dict:
        return {
            "outcome": self.outcome,
            "attempts": [{"draft": d, "diagnostics": list(diags)} for d, diags in self.attempts],
        }


@dataclass
class RepairResult:
    trace: RepairTrace
    rule: SigmaRule | None = None
    query: SplunkQuery | None = None

    @property
    def accepted(self) -> bool:
        return self.trace.outcome == "accepted"


class RepairAborted(GatewayError):
    def __init__(self, trace: RepairTrace, cause: Exception):
        super().__init__(f"repair aborted after {len(trace.attempts)} attempts: {cause}")
        self.trace = trace
        self.cause = cause


def check_draft(
    draft: str,
    catalog: TechniqueCatalog | None = None,
    allowed_fields: Sequence[str] | None = None,
) -> tuple[SigmaRule | None, SplunkQuery | None, list[str]]:
    """Parse, validate and compile; returns diagnostics instead of raising."""
    try:
        rule = parse_sigma(draft)
    except RuleError as exc:
        return None, None, [f"{type(exc).__name__}: {exc}"]
    diags = [str(d) for d in validate_sigma(rule, catalog, allowed_fields)]
    if diags:
        return rule, None, diags
    try:
        query = compile_to_splunk(rule)
    except RuleError as exc:
        return rule, None, [f"{type(exc).__name__}: {exc}"]
    return rule, query, []


def _extract_draft(text: str) -> str:
    docs = split_yaml_documents(text)
    return docs[0] if docs else text


def repair_loop(
    draft: str,
    gateway,
    max_attempts: int = MAX_ATTEMPTS,
    *,
    catalog: TechniqueCatalog | None = None,
    allowed_fields: Sequence[str] | None = None,
) -> RepairResult:
    """Check the draft and feed diagnostics back until it passes or the budget is spent.

    Makes at most ``max_attempts - 1`` gateway calls. The trace keeps every
    attempt's draft and diagnostics.
    """
    if not 1 <= max_attempts <= MAX_ATTEMPTS:
        raise ValueError(f"max_attempts must lie in [1, {MAX_ATTEMPTS}]")
    trace = RepairTrace()
    current = draft
    while True:
        rule, query, diags = check_draft(current, catalog, allowed_fields)
        trace.attempts.append((current, diags))
        if not diags:
            trace.outcome = "accepted"
            return RepairResult(trace, rule, query)
        if len(trace.attempts) >= max_attempts:
            trace.outcome = "discarded"
            return RepairResult(trace)
        system, messages = repair_prompt(current, diags)
        try:
            current = _extract_draft(gateway.complete(system, messages, None))
        except GatewayError as exc:
            raise RepairAborted(trace, exc) from exc


# -- judgment ------------------------------------------------------------------------

@dataclass(frozen=True)
class RuleJudgment:
    keep: bool
    reason: str
    flagged: bool = False


def judge_rule(report_text: str, rule: SigmaRule | str, gateway) -> RuleJudgment:
    """Keep or drop a compiled rule; unparseable output and gateway failures drop it."""
    rule_yaml = rule if isinstance(rule, str) else render_sigma(rule)
    system, messages = rule_judge_prompt(report_text, rule_yaml)
    try:
        text = gateway.complete(system, messages, "rule_relevance")
    except GatewayError as exc:
        log.warning("rule judgment gateway failure: %s", exc)
        return RuleJudgment(False, "gateway failure", True)
    try:
        verdict = parse_json_payload(text, "rule_relevance")
    except PayloadError:
        return RuleJudgment(False, "unparseable judgment", True)
    return RuleJudgment(verdict.yes, verdict.reason or ("kept" if verdict.yes else "filtered"))


# -- end to end for one report ----------------------------------------------------------

@dataclass
class RuleOutcome:
    draft_index: int
    repair: RepairResult
    judgment: RuleJudgment | None = None

    @property
    def kept(self) -> bool:
        return self.repair.accepted and self.judgment is not None and self.judgment.keep


@dataclass
class RuleRun:
    report_id: str
    outcomes: list[RuleOutcome]
    overflow: int = 0
    aborted: int = 0

    def kept(self) -> list[RuleOutcome]:
        return [o for o in self.outcomes if o.kept]

    @property
    def total_repairs(self) -> int:
        return sum(o.repair.trace.repairs for o in self.outcomes)


def rules_for_report(
    report_text: str,
    intel: AttackIntel | None,
    gateway,
    *,
    report_id: str = "report",
    use_ttp: bool = True,
    field_study: bool = False,
    max_drafts: int = DEFAULT_MAX_DRAFTS,
    max_attempts: int = MAX_ATTEMPTS,
    catalog: TechniqueCatalog | None = None,
) -> RuleRun:
    drafts = generate_rules(
        report_text, intel, gateway, use_ttp=use_ttp, field_study=field_study, max_drafts=max_drafts
    )
    allowed = FIELD_STUDY_FIELDS if field_study else None
    outcomes = []
    aborted = 0
    for idx, draft in enumerate(drafts.drafts):
        try:
            result = repair_loop(draft, gateway, max_attempts, catalog=catalog, allowed_fields=allowed)
        except RepairAborted as exc:
            log.warning("draft %d: %s", idx, exc)
            aborted += 1
            outcomes.append(RuleOutcome(idx, RepairResult(exc.trace)))
            continue
        judgment = judge_rule(report_text, result.rule, gateway) if result.accepted else None
        outcomes.append(RuleOutcome(idx, result, judgment))
    return RuleRun(report_id, outcomes, drafts.overflow, aborted)


# -- bundle -------------------------------------------------------------------------------

def slugify(title: str) -> str:
    slug = re.sub(r"[^a-z0-9]+", "-", title.lower()).strip("-")
    return slug[:80].rstrip("-") or "rule"


def write_rule_bundle(out_dir: str | Path, run: RuleRun) -> list[str]:
    """Write ``<slug>.yml`` / ``<slug>.spl`` per kept rule plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    used: dict[str, int] = {}
    manifest = []
    for outcome in run.kept():
        rule, query = outcome.repair.rule, outcome.repair.query
        base = slugify(rule.title)
        used[base] = used.get(base, 0) + 1
        slug = base if used[base] == 1 else f"{base}-{used[base]}"
        (out / f"{slug}.yml").write_text(render_sigma(rule), encoding="utf-8")
        (out / f"{slug}.spl").write_text(query.text + "\n", encoding="utf-8")
        manifest.append(
            {
                "slug": slug,
                "title": rule.title,
                "report_id": run.report_id,
                "technique_tags": rule.attack_tags(),
                "tags": list(rule.tags),
                "reason": outcome.judgment.reason,
                "attempts": len(outcome.repair.trace.attempts),
            }
        )
    doc = {
        "report_id": run.report_id,
        "rules": manifest,
        "drafts": len(run.outcomes),
        "discarded": sum(not o.repair.accepted for o in run.outcomes),
        "filtered": sum(o.repair.accepted and not o.kept for o in run.outcomes),
        "overflow": run.overflow,
    }
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return [m["slug"] for m in manifest]
