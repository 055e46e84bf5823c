"""Prompt assembly for every model-facing step.

Each prompt is Background + Task + Guidelines (+ Examples) + Input, and ends
with the JSON output contract the matching ``payloads`` schema expects.
"""

from __future__ import annotations

from typing import Iterable, Mapping, Sequence

ANALYST_BACKGROUND = "You assist a cybersecurity analyst who studies threat intelligence reports."
RULE_AUTHOR_BACKGROUND = "You write Sigma detection rules for a security operations team."
RULE_JUDGE_BACKGROUND = "You review detection rules on behalf of a cybersecurity analyst."

FORMAT_IOC = '{"ioc": ["IOC1", "IOC2", ...]}'
FORMAT_TECHNIQUE = '{"technique": ["TACTIC, TECHNIQUE", "TACTIC, TECHNIQUE", ...]}'
FORMAT_JUDGMENT = '{"if_exist": "YES/NO", "reason": "REASON"}'
FORMAT_PROCEDURE = '{"procedure": ["1. PROCEDURE1", "2. PROCEDURE2", "3. PROCEDURE3", ...]}'
FORMAT_RULE_RELEVANCE = '{"reason": "REASON", "relevant": "YES/NO"}'
FORMAT_TRIPLES = '{"triples": [["ENTITY", "VERB", "ENTITY"], ...]}'

FIELD_STUDY_FIELDS = ("user_agent", "extracted_source", "url")


def _bullets(lines: Iterable[str]) -> str:
    return "\n".join(f"- {line}" for line in lines)


def _compose(*sections: tuple[str, str]) -> str:
    return "\n\n".join(f"{title}:\n{body}" for title, body in sections if body)


# -- IoC extraction ---------------------------------------------------------------

IOC_GUIDELINES = (
    "List IP addresses, domains, URLs, file hashes, file paths, registry keys and e-mail addresses.",
    "Copy each indicator exactly as written in the report.",
    "Answer with JSON only.",
    "When the report has no indicator, answer with an empty list.",
)
IOC_EXAMPLES = (
    "Network indicators: 203.0.113.7, update.example-cdn.net",
    "Host indicators: C:\\Users\\Public\\svc.exe, d41d8cd98f00b204e9800998ecf8427e",
)


def ioc_prompt(text: str) -> tuple[str, list[str]]:
    system = ANALYST_BACKGROUND
    body = _compose(
        ("Task", "Find every indicator of compromise in the report below."),
        ("Guidelines", _bullets(IOC_GUIDELINES) + f"\nOutput format:\n{FORMAT_IOC}"),
        ("Examples", "\n".join(IOC_EXAMPLES)),
        ("Report", text),
    )
    return system, [body]


# -- in-context technique classification -----------------------------------------

CLASSIFY_GUIDELINES = (
    "A tactic is the goal behind an action; a technique is the method used to reach it.",
    "Name only techniques that appear in the mapping above.",
    "Write each entry as the tactic name, a comma, then the technique name.",
    "Answer with JSON only.",
)


def render_tactic_descriptions(descriptions: Mapping[str, str]) -> str:
    return "\n".join(f"{name}: {text}" for name, text in descriptions.items())


def render_tactic_mapping(mapping: Mapping[str, Sequence[tuple[str, str]]]) -> str:
    lines = []
    for tactic, techniques in mapping.items():
        names = "; ".join(f"{tid} {name}" for tid, name in techniques)
        lines.append(f"{tactic}: {names}")
    return "\n".join(lines)


def classify_prompt(part_text: str, tactic_descriptions: str, tactic_mapping: str) -> tuple[str, list[str]]:
    system = ANALYST_BACKGROUND
    task = (
        "Identify the ATT&CK techniques used in the report excerpt.\n"
        f"Tactics and their meaning:\n{tactic_descriptions}\n"
        f"Techniques available under each tactic:\n{tactic_mapping}"
    )
    body = _compose(
        ("Task", task),
        ("Guidelines", _bullets(CLASSIFY_GUIDELINES) + f"\nOutput format:\n{FORMAT_TECHNIQUE}"),
        ("Report excerpt", part_text),
    )
    return system, [body]


# -- judgment ----------------------------------------------------------------------

JUDGE_GUIDELINES = (
    "Decide whether the report gives evidence that the technique was used.",
    "Answer YES with the supporting evidence, or NO with what is missing.",
    "Answer with JSON only.",
)


def judge_prompt(report_text: str, technique: str, description: str) -> tuple[str, list[str]]:
    system = ANALYST_BACKGROUND
    body = _compose(
        ("Task", f"Check one candidate technique against the full report.\nCandidate: {technique}\nDescription: {description}"),
        ("Guidelines", _bullets(JUDGE_GUIDELINES) + f"\nOutput format:\n{FORMAT_JUDGMENT}"),
        ("Report", report_text),
    )
    return system, [body]


# -- procedures ------------------------------------------------------------------

PROCEDURE_GUIDELINES = (
    "Describe the concrete steps, not tactic or technique names.",
    "Write every step as <entity> <relationship> <action>.",
    "Number the steps 1, 2, 3 and so on.",
    "Keep indicators of compromise and named entities verbatim.",
    "Answer with JSON only.",
)


def procedure_prompt(report_text: str, ttp_summary: str, context: str) -> tuple[str, list[str]]:
    system = ANALYST_BACKGROUND
    task = "Rewrite the attacker's actions from the report as an ordered list of structured procedure steps."
    inputs = f"Report:\n{report_text}"
    if ttp_summary:
        inputs += f"\n\nIdentified techniques:\n{ttp_summary}"
    inputs += f"\n\nRetrieved context:\n{context}" if context else "\n\nRetrieved context:\n(none)"
    body = _compose(
        ("Task", task),
        ("Guidelines", _bullets(PROCEDURE_GUIDELINES) + f"\nOutput format:\n{FORMAT_PROCEDURE}"),
        ("Input", inputs),
    )
    return system, [body]


# -- triple extraction (graph building) ------------------------------------------

TRIPLE_GUIDELINES = (
    "Extract (entity, verb, entity) triples stated in the text.",
    "Use at most eight triples.",
    "Answer with JSON only.",
)


def triple_prompt(text: str) -> tuple[str, list[str]]:
    body = _compose(
        ("Task", "Turn the procedure example into entity relationships."),
        ("Guidelines", _bullets(TRIPLE_GUIDELINES) + f"\nOutput format:\n{FORMAT_TRIPLES}"),
        ("Text", text),
    )
    return ANALYST_BACKGROUND, [body]


# -- rule generation --------------------------------------------------------------

RULE_GUIDELINES = (
    "Emit YAML Sigma rules, one document per rule, separated by ---.",
    "Cover different observable behaviours rather than repeating one pattern.",
    "Keep every rule specific to the reported activity; broad rules are rejected.",
    "Consider follow-on operations an attacker would need and cover them too.",
    "Use only the field modifiers contains, startswith and endswith.",
    "Do not add an id field.",
    "Output the rules only, with no commentary.",
)


def field_study_guidelines() -> tuple[str, ...]:
    allowed = ", ".join(FIELD_STUDY_FIELDS)
    base = tuple(g for g in RULE_GUIDELINES if not g.startswith("Consider follow-on"))
    return base + (f"Selections may only use these fields: {allowed}.",)


def rule_prompt(report_text: str, ttp_block: str | None, *, field_study: bool = False) -> tuple[str, list[str]]:
    guidelines = field_study_guidelines() if field_study else RULE_GUIDELINES
    task = f"Write Sigma rules that detect the attacks described below.\nReport:\n{report_text}"
    if ttp_block:
        task += f"\nTTPs:\n{ttp_block}"
    body = _compose(("Task", task), ("Guidelines", _bullets(guidelines)))
    return RULE_AUTHOR_BACKGROUND, [body]


REPAIR_GUIDELINES = (
    "Fix every listed problem.",
    "Return the corrected YAML rule only.",
)


def repair_prompt(draft: str, diagnostics: Sequence[str]) -> tuple[str, list[str]]:
    body = _compose(
        ("Task", "The Sigma rule below failed validation or conversion. Correct it."),
        ("Problems", "\n".join(f"- {d}" for d in diagnostics)),
        ("Guidelines", _bullets(REPAIR_GUIDELINES)),
        ("Rule", draft),
    )
    return RULE_AUTHOR_BACKGROUND, [body]


RULE_JUDGE_GUIDELINES = (
    "Reject rules that are unrelated to the report.",
    "Reject rules so broad that benign activity would trigger them.",
    'Set "relevant" to YES to keep the rule and NO to drop it.',
    "Answer with JSON only.",
)


def rule_judge_prompt(report_text: str, rule_yaml: str) -> tuple[str, list[str]]:
    body = _compose(
        ("Task", "Decide whether the rule below is relevant to the report that follows it."),
        ("Guidelines", _bullets(RULE_JUDGE_GUIDELINES) + f"\nOutput format:\n{FORMAT_RULE_RELEVANCE}"),
        ("Rule", rule_yaml.rstrip("\n")),
        ("Report", report_text),
    )
    return RULE_JUDGE_BACKGROUND, [body]
