"""Offline stand-in for the chat model used by the ``deterministic_mock`` backend.

It reads the same prompts a real model would receive and answers from
keyword tables, so every pipeline stage produces plausible, repeatable
output without network access.
"""

from __future__ import annotations

import json
import re
from functools import lru_cache

import yaml

from .attack_kb import TECHNIQUE_ID_RE, TechniqueCatalog, load_sample_catalog
from .errors import CtiError, MissingField

# lowercase substrings that indicate a technique in report text
TECHNIQUE_KEYWORDS: dict[str, tuple[str, ...]] = {
    "T1595": ("port scan", "scanned", "active scanning"),
    "T1592": ("victim host", "host information"),
    "T1583": ("registered domain", "acquired infrastructure", "rented servers"),
    "T1588": ("purchased", "obtained tooling"),
    "T1566": ("phishing",),
    "T1566.001": ("spearphishing attachment", "malicious attachment", "attachment"),
    "T1190": ("public-facing", "vulnerable web server", "cve-"),
    "T1195": ("supply chain",),
    "T1078": ("valid account", "stolen credentials", "legitimate credentials"),
    "T1059": ("cmd.exe", "command shell"),
    "T1059.001": ("powershell",),
    "T1204": ("opened the", "enable macros", "user execution"),
    "T1053.005": ("schtasks", "scheduled task"),
    "T1547": ("run key", "currentversion\\run", "autostart"),
    "T1197": ("bitsadmin", "bits job"),
    "T1505.003": ("web shell", "webshell"),
    "T1548": ("uac bypass", "bypass uac"),
    "T1055": ("inject",),
    "T1055.012": ("process hollowing", "hollowed"),
    "T1112": ("reg.exe", "reg add", "registry"),
    "T1027": ("obfuscat", "base64", "encodedcommand"),
    "T1070": ("wevtutil", "clear the event log", "cleared event logs"),
    "T1656": ("impersonat",),
    "T1003": ("credential dump", "dumped credentials"),
    "T1003.001": ("lsass", "mimikatz", "sekurlsa"),
    "T1110": ("brute force", "password spray"),
    "T1555": ("password store", "browser credentials", "keychain"),
    "T1082": ("systeminfo", "system information"),
    "T1083": ("dir /s", "file and directory"),
    "T1057": ("tasklist", "process list"),
    "T1615": ("gpresult", "group policy"),
    "T1021.002": ("admin$", "psexec", "smb share"),
    "T1570": ("lateral tool transfer", "copied the tool"),
    "T1005": ("local files", "collected documents"),
    "T1113": ("screenshot", "screen capture"),
    "T1560": ("7z.exe", "rar.exe", "archived the", "compressed the"),
    "T1557.001": ("llmnr", "nbt-ns"),
    "T1071.001": ("http beacon", "over http", "https c2"),
    "T1105": ("certutil", "downloaded additional", "ingress tool"),
    "T1573": ("encrypted channel",),
    "T1041": ("exfiltrat",),
    "T1048": ("dns tunnel", "over ftp"),
    "T1490": ("vssadmin", "shadow cop", "shadowstorage", "wbadmin", "bcdedit"),
    "T1486": ("ransom", "encrypted the files", "encrypts files"),
    "T1489": ("net stop", "sc stop", "stopped services"),
}

# (title, logsource category, selection mapping) per technique
RULE_TEMPLATES: dict[str, tuple[str, str, dict]] = {
    "T1490": (
        "Shadow Copy Tampering via VSSAdmin",
        "process_creation",
        {"Image|endswith": "\\vssadmin.exe", "CommandLine|contains": ["delete shadows", "resize shadowstorage"]},
    ),
    "T1059.001": (
        "Encoded PowerShell Command Line",
        "process_creation",
        {"Image|endswith": "\\powershell.exe", "CommandLine|contains": ["-enc", "-EncodedCommand"]},
    ),
    "T1053.005": (
        "Scheduled Task Creation via Schtasks",
        "process_creation",
        {"Image|endswith": "\\schtasks.exe", "CommandLine|contains": "/create"},
    ),
    "T1003.001": (
        "LSASS Memory Dump Attempt",
        "process_creation",
        {"CommandLine|contains": ["sekurlsa", "lsass.dmp", "comsvcs.dll, MiniDump"]},
    ),
    "T1566.001": (
        "Office Application Spawning Shell",
        "process_creation",
        {"ParentImage|endswith": ["\\winword.exe", "\\excel.exe"], "Image|endswith": ["\\cmd.exe", "\\powershell.exe"]},
    ),
    "T1112": (
        "Registry Modification via Reg Add",
        "process_creation",
        {"Image|endswith": "\\reg.exe", "CommandLine|contains": " add "},
    ),
    "T1197": (
        "BITS Transfer Job Creation",
        "process_creation",
        {"Image|endswith": "\\bitsadmin.exe", "CommandLine|contains": "/transfer"},
    ),
    "T1070": (
        "Event Log Cleared with Wevtutil",
        "process_creation",
        {"Image|endswith": "\\wevtutil.exe", "CommandLine|contains": " cl "},
    ),
    "T1105": (
        "Certutil Remote Download",
        "process_creation",
        {"Image|endswith": "\\certutil.exe", "CommandLine|contains": "urlcache"},
    ),
    "T1021.002": (
        "Admin Share Access from Command Line",
        "process_creation",
        {"CommandLine|contains": ["\\ADMIN$", "\\C$"]},
    ),
    "T1082": (
        "System Information Discovery via Systeminfo",
        "process_creation",
        {"Image|endswith": "\\systeminfo.exe"},
    ),
    "T1057": (
        "Process Listing via Tasklist",
        "process_creation",
        {"Image|endswith": "\\tasklist.exe"},
    ),
    "T1560": (
        "Archive Utility Packing Data",
        "process_creation",
        {"Image|endswith": ["\\7z.exe", "\\rar.exe"], "CommandLine|contains": " a "},
    ),
    "T1489": (
        "Service Stopped from Command Line",
        "process_creation",
        {"Image|endswith": ["\\net.exe", "\\sc.exe"], "CommandLine|contains": "stop"},
    ),
    "T1547": (
        "Run Key Persistence Written",
        "registry_set",
        {"TargetObject|contains": "\\CurrentVersion\\Run"},
    ),
}

_SECTION_TITLES = ("Task", "Guidelines", "Examples", "Report", "Report excerpt", "Input", "Problems", "Rule", "Text")


def _section(body: str, title: str) -> str:
    """Body of ``title:`` up to the next known section header."""
    marker = f"{title}:\n"
    start = body.find(marker) if body.startswith(marker) else body.find("\n\n" + marker)
    if start < 0:
        return ""
    start = body.index(marker, start) + len(marker)
    ends = [body.find(f"\n\n{t}:\n", start) for t in _SECTION_TITLES]
    ends = [e for e in ends if e >= 0]
    return body[start : min(ends)] if ends else body[start:]


def _between(text: str, head: str, tail: str | None) -> str:
    _, _, rest = text.partition(head)
    if tail is None:
        return rest
    return rest.rpartition(tail)[0] if tail in rest else rest


def _hits(text: str, technique_id: str) -> list[str]:
    low = text.lower()
    return [k for k in TECHNIQUE_KEYWORDS.get(technique_id, ()) if k in low]


class OfflineAnalyst:
    """Keyword-driven responder. ``catalog`` defaults to the bundled sample."""

    def __init__(self, catalog: TechniqueCatalog | None = None):
        self._catalog = catalog

    @property
    def catalog(self) -> TechniqueCatalog:
        if self._catalog is None:
            self._catalog = _sample()
        return self._catalog

    def __call__(self, request) -> str:
        body = request.user_messages[-1]
        handler = {
            "ioc_list": self.iocs,
            "technique_list": self.techniques,
            "judgment": self.judge,
            "procedure_list": self.procedures,
            "triple_list": self.triples,
            "rule_relevance": self.rule_relevance,
        }.get(request.schema_id)
        if handler is not None:
            return handler(body)
        task = _section(body, "Task")
        if task.startswith("The Sigma rule below failed"):
            return self.repair(body)
        if task.startswith("Write Sigma rules"):
            return self.rules(body)
        return "I cannot help with that request."

    # -- extraction ---------------------------------------------------------------
    def iocs(self, body: str) -> str:
        from .iocs import regex_iocs

        return json.dumps({"ioc": [i.value for i in regex_iocs(_section(body, "Report"))]})

    def detected(self, text: str) -> list[str]:
        return [e.technique_id for e in self.catalog.entries if _hits(text, e.technique_id)]

    def techniques(self, body: str) -> str:
        excerpt = _section(body, "Report excerpt")
        answers = []
        for tid in self.detected(excerpt):
            e = self.catalog.get(tid)
            answers.append(f"{e.tactics[0]}, {e.name}")
        return json.dumps({"technique": answers})

    def judge(self, body: str) -> str:
        task = _section(body, "Task")
        label = _between(task, "Candidate: ", "\nDescription:")
        ids = TECHNIQUE_ID_RE.findall(label)
        report = _section(body, "Report")
        hits = _hits(report, ids[0]) if ids else []
        if hits:
            return json.dumps({"if_exist": "YES", "reason": f"the report mentions {hits[0]!r}"})
        return json.dumps({"if_exist": "NO", "reason": "no supporting evidence in the report"})

    # -- procedures -----------------------------------------------------------------
    def procedures(self, body: str) -> str:
        from .iocs import regex_iocs, segment_sentences
        from .procedures import analyze_step

        inputs = _section(body, "Input")
        report = _between(inputs, "Report:\n", "\n\nIdentified techniques:" if "\n\nIdentified techniques:" in inputs else "\n\nRetrieved context:")
        steps = []
        for sentence in segment_sentences(report, regex_iocs(report)):
            flat = " ".join(sentence.split())
            if analyze_step(flat)[1] is not None:
                steps.append(f"{len(steps) + 1}. {flat}")
        return json.dumps({"procedure": steps})

    def triples(self, body: str) -> str:
        from .procedures import extract_triples_heuristic

        text = _section(body, "Text")
        return json.dumps({"triples": [list(t[:3]) for t in extract_triples_heuristic(text)]})

    # -- rules -------------------------------------------------------------------------
    def rules(self, body: str) -> str:
        task = _section(body, "Task")
        if "\nTTPs:\n" in task:
            report, _, ttps = task.partition("\nTTPs:\n")
            ids = list(dict.fromkeys(TECHNIQUE_ID_RE.findall(ttps)))
        else:
            report, ids = task, self.detected(task)
        report = _between(report, "Report:\n", None)
        guidelines = _section(body, "Guidelines")
        docs = []
        if "user_agent" in guidelines:
            urls = [u for u in re.findall(r"https?://[^\s\"'<>]+", report)]
            if urls:
                docs.append(_rule_yaml("Requests to Reported URLs", "webserver", {"url|contains": urls}, []))
        else:
            for tid in ids:
                if tid in RULE_TEMPLATES:
                    title, category, selection = RULE_TEMPLATES[tid]
                    docs.append(_rule_yaml(title, category, selection, [tid]))
        return "\n---\n".join(docs)

    def repair(self, body: str) -> str:
        from .sigma import KNOWN_MODIFIERS, parse_sigma

        draft = _section(body, "Rule")
        try:
            doc = yaml.safe_load(draft)
        except yaml.YAMLError:
            return draft
        if not isinstance(doc, dict):
            return draft
        doc.pop("id", None)
        det = doc.get("detection")
        if isinstance(det, dict):
            for name, sel in list(det.items()):
                if isinstance(sel, dict):
                    det[name] = {
                        k.split("|")[0] if any(m not in KNOWN_MODIFIERS for m in k.split("|")[1:]) else k: v
                        for k, v in sel.items()
                    }
            names = [n for n in det if n != "condition"]
            try:
                parse_sigma(yaml.safe_dump(doc, sort_keys=False))
            except MissingField as exc:
                if exc.name == "condition" and names:
                    det["condition"] = " or ".join(names)
            except CtiError:
                pass
        return yaml.safe_dump(doc, sort_keys=False)

    def rule_relevance(self, body: str) -> str:
        rule_text = _section(body, "Rule")
        report = body.partition("\n\nReport:\n")[2]
        try:
            doc = yaml.safe_load(rule_text)
        except yaml.YAMLError:
            doc = None
        values = []
        det = doc.get("detection", {}) if isinstance(doc, dict) else {}
        for name, sel in (det.items() if isinstance(det, dict) else ()):
            if isinstance(sel, dict):
                for v in sel.values():
                    values.extend(v if isinstance(v, list) else [v])
        low = report.lower()
        for v in values:
            probe = str(v).strip("*").strip("\\").strip().lower()
            if len(probe) >= 3 and probe in low:
                return json.dumps({"reason": f"the report mentions {probe!r}", "relevant": "YES"})
        return json.dumps({"reason": "rule does not reflect the reported activity", "relevant": "NO"})


def _rule_yaml(title: str, category: str, selection: dict, technique_ids: list[str]) -> str:
    doc = {
        "title": title,
        "description": f"Detects activity associated with {', '.join(technique_ids) or 'the report'}.",
        "author": "ctirules offline analyst",
        "logsource": {"category": category, "product": "windows" if category != "webserver" else None},
        "detection": {"selection": selection, "condition": "selection"},
        "tags": [f"attack.{t.lower()}" for t in technique_ids],
        "level": "high",
    }
    if doc["logsource"]["product"] is None:
        del doc["logsource"]["product"]
    if not doc["tags"]:
        del doc["tags"]
    return yaml.safe_dump(doc, sort_keys=False, width=4096)


@lru_cache(maxsize=1)
def _sample() -> TechniqueCatalog:
    return load_sample_catalog()
