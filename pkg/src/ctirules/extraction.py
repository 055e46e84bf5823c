"""Technique extraction: chunk, classify, retrieve, judge, order."""

from __future__ import annotations

import logging
from array import array
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Sequence

from .attack_kb import (
    TACTIC_DESCRIPTIONS,
    TECHNIQUE_ID_RE,
    EmbeddingVector,
    TechniqueCatalog,
    VectorStore,
    as_vector,
    canonical_tactic,
    order_by_attack_stage,
    parent_id,
)
from . import kernels
from .errors import (
    CtiError,
    DimensionMismatch,
    EmptyStore,
    IocExtractionError,
    PayloadError,
    UnknownTactic,
    ZeroNorm,
)
from .iocs import Part, chunk_report, extract_iocs
from .payloads import parse_json_payload
from .prompts import classify_prompt, judge_prompt, render_tactic_descriptions, render_tactic_mapping

log = logging.getLogger(__name__)

PROVENANCES = ("icl", "retrieval", "both")


@dataclass(frozen=True)
class TechniqueCandidate:
    technique_id: str
    technique_name: str
    tactic: str
    provenance: str
    source_parts: tuple[int, ...] = ()
    similarity: float | None = None
    reason: str | None = None

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"bad provenance {self.provenance!r}")
        if self.similarity is not None and not -1.0 <= self.similarity <= 1.0:
            raise ValueError("similarity must lie in [-1, 1]")


@dataclass(frozen=True)
class JudgedCandidate:
    candidate: TechniqueCandidate
    verdict: str  # "accepted" or "rejected"
    reason: str
    flagged: bool = False

    def __post_init__(self):
        if self.verdict not in ("accepted", "rejected"):
            raise ValueError(f"bad verdict {self.verdict!r}")
        if not self.reason:
            raise ValueError("judgment reason must be non-empty")

    @property
    def tactic(self) -> str:
        return self.candidate.tactic

    def to_json(self) -> dict:
        c = self.candidate
        return {
            "tactic": c.tactic,
            "technique_id": c.technique_id,
            "name": c.technique_name,
            "provenance": c.provenance,
            "similarity": c.similarity,
            "reason": self.reason,
            "source_parts": list(c.source_parts),
            "flagged": self.flagged,
        }

    @classmethod
    def from_json(cls, obj: dict, verdict: str) -> "JudgedCandidate":
        cand = TechniqueCandidate(
            obj["technique_id"],
            obj["name"],
            obj["tactic"],
            obj["provenance"],
            tuple(obj.get("source_parts", ())),
            obj.get("similarity"),
            obj["reason"],
        )
        return cls(cand, verdict, obj["reason"], bool(obj.get("flagged", False)))


@dataclass(frozen=True)
class AttackIntel:
    report_id: str
    techniques: tuple[JudgedCandidate, ...]
    rejected: tuple[JudgedCandidate, ...] = ()
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [j.candidate.technique_id for j in self.techniques]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate technique ids in accepted techniques")

    def to_json(self) -> dict:
        return {
            "report_id": self.report_id,
            "techniques": [j.to_json() for j in self.techniques],
            "rejected": [j.to_json() for j in self.rejected],
            "stats": dict(self.stats),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AttackIntel":
        return cls(
            obj["report_id"],
            tuple(JudgedCandidate.from_json(t, "accepted") for t in obj.get("techniques", ())),
            tuple(JudgedCandidate.from_json(t, "rejected") for t in obj.get("rejected", ())),
            dict(obj.get("stats", {})),
        )

    def technique_ids(self) -> list[str]:
        return [j.candidate.technique_id for j in self.techniques]

    def ttp_block(self) -> str:
        """One line per accepted technique, used in downstream prompts."""
        return "\n".join(
            f"{j.candidate.tactic}, {j.candidate.technique_id} {j.candidate.technique_name}: {j.reason}"
            for j in self.techniques
        )


# -- classification ---------------------------------------------------------------

@dataclass
class Classification:
    candidates: list[TechniqueCandidate]
    unresolved: int = 0
    diagnostics: list[str] = field(default_factory=list)


@lru_cache(maxsize=8)
def _catalog_context(catalog: TechniqueCatalog) -> tuple[str, str]:
    descriptions = render_tactic_descriptions({t: TACTIC_DESCRIPTIONS[t] for t in catalog.tactics})
    mapping = {
        tactic: [(tid, catalog.get(tid).name) for tid in ids] for tactic, ids in catalog.tactic_index.items()
    }
    return descriptions, render_tactic_mapping(mapping)


def resolve_technique(entry: str, catalog: TechniqueCatalog) -> tuple[str, str, str] | None:
    """Map a ``"TACTIC, TECHNIQUE"`` answer to (technique_id, name, tactic).

    The technique is matched by case-insensitive name first, then by any
    technique id it mentions. The stated tactic is kept when the technique
    belongs to it; otherwise the technique's first tactic is used.
    """
    tactic_text, sep, technique_text = entry.partition(",")
    if not sep:
        tactic_text, technique_text = "", entry
    technique_text = technique_text.strip()
    try:
        tactic = canonical_tactic(tactic_text.strip()) if tactic_text.strip() else None
    except UnknownTactic:
        tactic = None
    matches = catalog.find_by_name(technique_text)
    if not matches:
        ids = TECHNIQUE_ID_RE.findall(technique_text) or TECHNIQUE_ID_RE.findall(tactic_text)
        matches = [catalog.get(i) for i in ids if i in catalog]
    if not matches:
        return None
    if tactic:
        for m in matches:
            if tactic in m.tactics:
                return m.technique_id, m.name, tactic
    m = matches[0]
    return m.technique_id, m.name, m.tactics[0]


def classify_part(part: Part, catalog: TechniqueCatalog, gateway) -> Classification:
    descriptions, mapping = _catalog_context(catalog)
    system, messages = classify_prompt(part.text, descriptions, mapping)
    entries = parse_json_payload(gateway.complete(system, messages, "technique_list"), "technique_list")
    out: list[TechniqueCandidate] = []
    seen = set()
    unresolved = 0
    for entry in entries:
        hit = resolve_technique(entry, catalog)
        if hit is None:
            unresolved += 1
            continue
        if hit[0] in seen:
            continue
        seen.add(hit[0])
        out.append(TechniqueCandidate(hit[0], hit[1], hit[2], "icl", (part.part_id,)))
    diagnostics = []
    if entries and not out:
        diagnostics.append(f"part {part.part_id}: none of {len(entries)} answers resolved against the catalog")
    return Classification(out, unresolved, diagnostics)


# -- retrieval -----------------------------------------------------------------------

def cosine_similarity(a: EmbeddingVector | Sequence[float], b: EmbeddingVector | Sequence[float]) -> float:
    """(a . b) / (|a| |b|), clamped to [-1, 1]."""
    va, vb = as_vector(a), as_vector(b)
    if va.dims != vb.dims:
        raise DimensionMismatch(f"{va.dims} vs {vb.dims} dims")
    xa, xb = array("d", va.values), array("d", vb.values)
    na, nb = kernels.vector_norm(xa), kernels.vector_norm(xb)
    if na == 0.0 or nb == 0.0:
        raise ZeroNorm("cosine similarity of a zero vector")
    return kernels.cosine_scan(xa, va.dims, array("d", [na]), xb, nb)[0]


def _embed(gateway, text: str) -> EmbeddingVector:
    embed = getattr(gateway, "embed", None) or gateway
    return as_vector(embed(text))


def retrieve_similar_techniques(
    part: Part,
    store: VectorStore,
    gateway,
    k: int = 3,
    *,
    catalog: TechniqueCatalog,
) -> list[TechniqueCandidate]:
    """Top-k catalog techniques by description similarity to the part.

    ``k`` larger than the store is clamped to the store size.
    """
    if len(store) == 0:
        raise EmptyStore("vector store is empty")
    if k < 1:
        raise ValueError("k must be >= 1")
    query = _embed(gateway, part.text)
    out = []
    for record, score in store.top_k(query, min(k, len(store))):
        entry = catalog.get(record.key)
        if entry is None:
            log.warning("store key %s missing from catalog", record.key)
            continue
        out.append(
            TechniqueCandidate(entry.technique_id, entry.name, entry.tactics[0], "retrieval", (part.part_id,), score)
        )
    return out


# -- judgment ----------------------------------------------------------------------

def judge_candidate(report_text: str, candidate: TechniqueCandidate, description: str, gateway) -> JudgedCandidate:
    """Accept or reject one candidate against the whole report (fail-closed)."""
    label = f"{candidate.tactic}, {candidate.technique_id} {candidate.technique_name}"
    system, messages = judge_prompt(report_text, label, description)
    text = gateway.complete(system, messages, "judgment")
    try:
        verdict = parse_json_payload(text, "judgment")
    except PayloadError as exc:
        log.warning("unparseable judgment for %s: %s", candidate.technique_id, exc)
        return JudgedCandidate(candidate, "rejected", "unparseable judgment", flagged=True)
    reason = verdict.reason or ("accepted" if verdict.yes else "rejected")
    return JudgedCandidate(
        replace(candidate, reason=reason), "accepted" if verdict.yes else "rejected", reason
    )


# -- end to end -------------------------------------------------------------------------

@dataclass(frozen=True)
class ExtractionConfig:
    report_id: str = "report"
    k: int = 3
    window: int = 3
    ioc_mode: str = "regex_plus_llm"
    fold_subtechniques: bool = False
    char_budget: int | None = 6000
    cover_gaps: bool = False
    max_workers: int | None = None


def _merge(a: TechniqueCandidate, b: TechniqueCandidate) -> TechniqueCandidate:
    prov = a.provenance if a.provenance == b.provenance else "both"
    sims = [s for s in (a.similarity, b.similarity) if s is not None]
    return replace(
        a,
        provenance=prov,
        source_parts=tuple(sorted(set(a.source_parts) | set(b.source_parts))),
        similarity=max(sims) if sims else None,
    )


def _fold(c: TechniqueCandidate, catalog: TechniqueCatalog) -> TechniqueCandidate:
    pid = parent_id(c.technique_id)
    parent = catalog.get(pid)
    if pid == c.technique_id or parent is None:
        return c
    tactic = c.tactic if c.tactic in parent.tactics else parent.tactics[0]
    return replace(c, technique_id=pid, technique_name=parent.name, tactic=tactic)


def extract_report(
    report_text: str,
    catalog: TechniqueCatalog,
    store: VectorStore,
    gateway,
    config: ExtractionConfig = ExtractionConfig(),
) -> AttackIntel:
    stats = {
        "iocs": 0,
        "parts": 0,
        "failed_parts": 0,
        "truncated_parts": 0,
        "unresolved": 0,
        "ioc_model_failed": 0,
        "judge_flagged": 0,
        "icl": 0,
        "retrieval": 0,
        "both": 0,
        "accepted": 0,
        "rejected": 0,
    }
    if not report_text.strip():
        return AttackIntel(config.report_id, (), (), stats)

    try:
        iocs = extract_iocs(report_text, gateway, config.ioc_mode)
    except IocExtractionError as exc:
        iocs = exc.iocs
        stats["ioc_model_failed"] = 1
    stats["iocs"] = len(iocs)
    parts = chunk_report(
        report_text, iocs, window=config.window, char_budget=config.char_budget, cover_gaps=config.cover_gaps
    )
    stats["parts"] = len(parts)
    stats["truncated_parts"] = sum(p.truncated for p in parts)

    def work(part: Part):
        try:
            cls = classify_part(part, catalog, gateway)
            retrieved = retrieve_similar_techniques(part, store, gateway, config.k, catalog=catalog)
        except CtiError as exc:
            log.warning("part %d skipped: %s", part.part_id, exc)
            return None
        return cls, retrieved

    workers = config.max_workers or getattr(getattr(gateway, "config", None), "max_parallel", 1)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(work, parts))

    merged: dict[str, TechniqueCandidate] = {}
    for res in results:
        if res is None:
            stats["failed_parts"] += 1
            continue
        cls, retrieved = res
        stats["unresolved"] += cls.unresolved
        for cand in [*cls.candidates, *retrieved]:
            if config.fold_subtechniques:
                cand = _fold(cand, catalog)
            prev = merged.get(cand.technique_id)
            merged[cand.technique_id] = cand if prev is None else _merge(prev, cand)
    for cand in merged.values():
        stats[cand.provenance] += 1

    def judge(cand: TechniqueCandidate) -> JudgedCandidate:
        return judge_candidate(report_text, cand, catalog.get(cand.technique_id).description, gateway)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        judged = list(pool.map(judge, merged.values()))
    accepted = [j for j in judged if j.verdict == "accepted"]
    rejected = [j for j in judged if j.verdict == "rejected"]
    stats["judge_flagged"] = sum(j.flagged for j in judged)
    stats["accepted"] = len(accepted)
    stats["rejected"] = len(rejected)
    return AttackIntel(config.report_id, tuple(order_by_attack_stage(accepted)), tuple(rejected), stats)

