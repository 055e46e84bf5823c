"""IoC recognition, IoC-safe sentence segmentation and anchor-window chunking."""

from __future__ import annotations

import ipaddress
import logging
import re
from dataclasses import dataclass, field
from typing import Sequence

from .errors import CtiError, IocExtractionError
from .payloads import parse_json_payload
from .prompts import ioc_prompt

log = logging.getLogger(__name__)

IOC_KINDS = ("ipv4", "ipv6", "domain", "url", "md5", "sha1", "sha256", "file_path", "registry_key", "email")

_TLDS = (
    "com net org info biz io gov edu mil int co me us uk de fr ru cn jp kr in br nl eu au ca ch it es se no pl "
    "cz ua ir kp tw hk sg top xyz online site club live tech app dev cloud link space store shop pw tk su cc ws"
).split()
_FILE_EXTS = (
    "exe dll sys scr bat cmd ps1 psm1 vbs vbe js jse hta lnk msi iso img zip rar 7z gz tar jar py sh elf bin dat "
    "tmp doc docx docm xls xlsx xlsm ppt pptx pdf rtf txt log ini cfg conf xml json yml yaml php asp aspx jsp"
).split()

_TRAIL = ".,;:)]}>'\""

_PATTERNS: dict[str, re.Pattern] = {
    "url": re.compile(r"\b(?:https?|ftp)://[^\s\"'<>`]+", re.I),
    "email": re.compile(r"\b[A-Za-z0-9._%+-]+@(?:[A-Za-z0-9-]+\.)+[A-Za-z]{2,}\b"),
    "registry_key": re.compile(
        r"\b(?:HKLM|HKCU|HKCR|HKU|HKCC|HKEY_LOCAL_MACHINE|HKEY_CURRENT_USER|HKEY_CLASSES_ROOT|HKEY_USERS"
        r"|HKEY_CURRENT_CONFIG)\\[^\s\"'<>`]+"
    ),
    "file_path": re.compile(
        r"(?:\b[A-Za-z]:\\[^\s\"'<>|`*?]+"
        r"|%[A-Za-z_]+%\\[^\s\"'<>|`*?]+"
        r"|(?<![\w/.])/(?:etc|tmp|usr|var|home|bin|sbin|opt|dev|root|proc|lib|Users|Library|Applications)/[^\s\"'<>`]*"
        r"|\b[\w-]+(?:\.[\w-]+)*\.(?:" + "|".join(_FILE_EXTS) + r")\b)",
        re.I,
    ),
    "sha256": re.compile(r"\b[0-9a-fA-F]{64}\b"),
    "sha1": re.compile(r"\b[0-9a-fA-F]{40}\b"),
    "md5": re.compile(r"\b[0-9a-fA-F]{32}\b"),
    "ipv6": re.compile(r"(?<![0-9A-Fa-f:.])(?:[0-9A-Fa-f]{0,4}:){2,7}[0-9A-Fa-f]{0,4}(?![0-9A-Fa-f:])"),
    "ipv4": re.compile(r"(?<![\d.])(?:\d{1,3}\.){3}\d{1,3}(?!\d|\.\d)"),
    "domain": re.compile(
        r"(?<![\w@.-])(?:[A-Za-z0-9](?:[A-Za-z0-9-]{0,61}[A-Za-z0-9])?\.)+(?:" + "|".join(_TLDS) + r")\b(?![.-]\w)",
        re.I,
    ),
}
# lower number wins when two equally long matches overlap
_PRIORITY = {kind: i for i, kind in enumerate(_PATTERNS)}


@dataclass(frozen=True)
class Ioc:
    kind: str
    value: str
    span: tuple[int, int]

    def __post_init__(self):
        if self.kind not in IOC_KINDS:
            raise ValueError(f"unknown IoC kind {self.kind!r}")
        start, end = self.span
        if not 0 <= start <= end:
            raise ValueError(f"bad IoC span {self.span}")


def _valid(kind: str, value: str) -> bool:
    if kind == "ipv4":
        try:
            ipaddress.IPv4Address(value)
        except ValueError:
            return False
        return True
    if kind == "ipv6":
        if sum(c.isalnum() for c in value) < 2:
            return False
        try:
            ipaddress.IPv6Address(value)
        except ValueError:
            return False
        return True
    if kind == "domain":
        return value.rsplit(".", 1)[-1].lower() not in _FILE_EXTS
    return True


def _regex_candidates(text: str) -> list[Ioc]:
    found = []
    for kind, pattern in _PATTERNS.items():
        for m in pattern.finditer(text):
            start, end = m.span()
            if kind in ("url", "file_path", "registry_key"):
                while end > start and text[end - 1] in _TRAIL:
                    end -= 1
            value = text[start:end]
            if value and _valid(kind, value):
                found.append(Ioc(kind, value, (start, end)))
    return found


def _resolve_overlaps(candidates: Sequence[Ioc]) -> list[Ioc]:
    ranked = sorted(candidates, key=lambda i: (-(i.span[1] - i.span[0]), _PRIORITY[i.kind], i.span[0]))
    taken: list[Ioc] = []
    for c in ranked:
        if all(c.span[1] <= t.span[0] or c.span[0] >= t.span[1] for t in taken):
            taken.append(c)
    return sorted(taken, key=lambda i: i.span)


def regex_iocs(text: str) -> list[Ioc]:
    """Non-overlapping pattern matches ordered by position."""
    return _resolve_overlaps(_regex_candidates(text))


def classify_ioc(value: str) -> str | None:
    """Kind whose pattern matches ``value`` in full, or None."""
    for kind, pattern in _PATTERNS.items():
        m = pattern.fullmatch(value)
        if m and _valid(kind, value):
            return kind
    return None


def _locate(text: str, value: str) -> int:
    pos = text.find(value)
    if pos < 0:
        pos = text.lower().find(value.lower())
    return pos


def extract_iocs(report_text: str, gateway=None, mode: str = "regex_only") -> list[Ioc]:
    """Regex tier, optionally extended by the model tier.

    Model items are kept only when their kind is recognisable, they occur in
    the report (first occurrence, case-insensitive) and they do not overlap an
    indicator already found; the value is copied from the report. When the model tier
    fails, :class:`IocExtractionError` carries the regex results.
    """
    if mode not in ("regex_only", "regex_plus_llm"):
        raise ValueError(f"unknown IoC mode {mode!r}")
    iocs = regex_iocs(report_text)
    if mode == "regex_only" or not report_text.strip():
        return iocs
    if gateway is None:
        raise ValueError("regex_plus_llm mode needs a gateway")
    try:
        system, messages = ioc_prompt(report_text)
        items = parse_json_payload(gateway.complete(system, messages, "ioc_list"), "ioc_list")
    except CtiError as exc:
        log.warning("model IoC tier failed: %s", exc)
        raise IocExtractionError(iocs, exc) from exc
    kept = list(iocs)
    for raw in items:
        value = raw.strip()
        kind = classify_ioc(value)
        if kind is None:
            continue
        pos = _locate(report_text, value)
        if pos < 0:
            continue
        span = (pos, pos + len(value))
        if any(span[0] < k.span[1] and k.span[0] < span[1] for k in kept):
            continue
        kept.append(Ioc(kind, report_text[span[0] : span[1]], span))
    return sorted(kept, key=lambda i: (i.span, i.kind))


# -- sentences -------------------------------------------------------------------

_SPLIT_RE = re.compile(r"(?<=[.!?])\s+|\n[ \t]*\n\s*")


def sentence_spans(report_text: str, iocs: Sequence[Ioc] = ()) -> list[tuple[int, int]]:
    """Character spans of sentences, with IoC interiors protected from splitting."""
    chars = list(report_text)
    for ioc in iocs:
        start, end = ioc.span
        for i in range(max(start, 0), min(end, len(chars))):
            if not chars[i].isspace():
                chars[i] = "x"
    masked = "".join(chars)
    spans = []
    pos = 0
    for m in _SPLIT_RE.finditer(masked):
        spans.append((pos, m.start()))
        pos = m.end()
    spans.append((pos, len(report_text)))
    out = []
    for a, b in spans:
        while a < b and report_text[a].isspace():
            a += 1
        while b > a and report_text[b - 1].isspace():
            b -= 1
        if a < b:
            out.append((a, b))
    return out


def segment_sentences(report_text: str, iocs: Sequence[Ioc] = ()) -> list[str]:
    return [report_text[a:b] for a, b in sentence_spans(report_text, iocs)]


# -- parts -------------------------------------------------------------------------

@dataclass(frozen=True)
class Part:
    part_id: int
    text: str
    sentence_span: tuple[int, int]  # inclusive, 0-based
    iocs: tuple[Ioc, ...] = field(default=())
    truncated: bool = False

    def __post_init__(self):
        if not self.text:
            raise ValueError("part text must be non-empty")
        if self.sentence_span[0] > self.sentence_span[1]:
            raise ValueError("sentence window must be contiguous")


def anchor_windows(n_sentences: int, anchors: Sequence[int]) -> list[tuple[int, int]]:
    """Windows [a-1, a+1] clamped to the document, overlapping ones merged."""
    windows: list[tuple[int, int]] = []
    for a in sorted(set(anchors)):
        lo, hi = max(a - 1, 0), min(a + 1, n_sentences - 1)
        if windows and lo <= windows[-1][1]:
            windows[-1] = (windows[-1][0], max(hi, windows[-1][1]))
        else:
            windows.append((lo, hi))
    return windows


def tile_windows(lo: int, hi: int, width: int) -> list[tuple[int, int]]:
    """Consecutive windows of ``width`` sentences covering [lo, hi]."""
    return [(s, min(s + width - 1, hi)) for s in range(lo, hi + 1, width)]


def chunk_report(
    report_text: str,
    iocs: Sequence[Ioc] = (),
    *,
    window: int = 3,
    char_budget: int | None = None,
    cover_gaps: bool = False,
) -> list[Part]:
    """Group sentences into parts around IoC-bearing sentences.

    Without anchors the document is tiled in windows of ``window`` sentences.
    ``cover_gaps`` additionally tiles sentences no anchor window reaches.
    Parts longer than ``char_budget`` are cut and marked truncated.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    spans = sentence_spans(report_text, iocs)
    if not spans:
        return []
    n = len(spans)

    def sentence_of(offset: int) -> int | None:
        for idx, (a, b) in enumerate(spans):
            if a <= offset < b:
                return idx
        return None

    anchors = [s for s in (sentence_of(i.span[0]) for i in iocs) if s is not None]
    if anchors:
        windows = anchor_windows(n, anchors)
        if cover_gaps:
            filled = []
            nxt = 0
            for lo, hi in windows:
                if lo > nxt:
                    filled.extend(tile_windows(nxt, lo - 1, window))
                filled.append((lo, hi))
                nxt = hi + 1
            if nxt < n:
                filled.extend(tile_windows(nxt, n - 1, window))
            windows = filled
    else:
        windows = tile_windows(0, n - 1, window)

    parts = []
    for pid, (lo, hi) in enumerate(windows):
        start, end = spans[lo][0], spans[hi][1]
        text = report_text[start:end]
        truncated = False
        if char_budget is not None and len(text) > char_budget:
            text = text[:char_budget]
            truncated = True
        inside = tuple(i for i in iocs if start <= i.span[0] < end)
        parts.append(Part(pid, text, (lo, hi), inside, truncated))
    return parts
