"""ATT&CK catalog loading, the technique-description vector store and tactic stages."""

from __future__ import annotations

import enum
import json
import math
import re
from array import array
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from . import kernels
from .errors import (
    DimensionMismatch,
    EmbedderFailure,
    EmptyCatalog,
    EmptyStore,
    SchemaViolation,
    UnknownTactic,
    UnreadableSource,
    ZeroNorm,
)

# Matrix column order; stage order follows from it.
TACTICS: tuple[str, ...] = (
    "Reconnaissance",
    "Resource Development",
    "Initial Access",
    "Execution",
    "Persistence",
    "Privilege Escalation",
    "Defense Evasion",
    "Credential Access",
    "Discovery",
    "Lateral Movement",
    "Collection",
    "Command and Control",
    "Exfiltration",
    "Impact",
)

TACTIC_DESCRIPTIONS: dict[str, str] = {
    "Reconnaissance": "The adversary is gathering information to plan future operations.",
    "Resource Development": "The adversary is establishing resources to support operations.",
    "Initial Access": "The adversary is trying to get into the network.",
    "Execution": "The adversary is trying to run malicious code.",
    "Persistence": "The adversary is trying to maintain their foothold.",
    "Privilege Escalation": "The adversary is trying to gain higher-level permissions.",
    "Defense Evasion": "The adversary is trying to avoid being detected.",
    "Credential Access": "The adversary is trying to steal account names and passwords.",
    "Discovery": "The adversary is trying to figure out the environment.",
    "Lateral Movement": "The adversary is trying to move through the environment.",
    "Collection": "The adversary is gathering data of interest to their goal.",
    "Command and Control": "The adversary is communicating with compromised systems to control them.",
    "Exfiltration": "The adversary is trying to steal data.",
    "Impact": "The adversary is trying to manipulate, interrupt, or destroy systems and data.",
}

TECHNIQUE_ID_RE = re.compile(r"T\d{4}(?:\.\d{3})?")

SAMPLE_CATALOG = Path(__file__).with_name("data") / "attack_sample.json"


class StageLabel(enum.IntEnum):
    Early = 0
    Middle = 1
    Moving = 2
    End = 3


_STAGE_OF: dict[str, StageLabel] = {}
for _name in TACTICS[:3]:
    _STAGE_OF[_name] = StageLabel.Early
for _name in TACTICS[3:8]:
    _STAGE_OF[_name] = StageLabel.Middle
for _name in TACTICS[8:10]:
    _STAGE_OF[_name] = StageLabel.Moving
for _name in TACTICS[10:]:
    _STAGE_OF[_name] = StageLabel.End

_TACTIC_LOOKUP = {t.lower(): t for t in TACTICS}
_TACTIC_LOOKUP.update({t.lower().replace(" ", "-"): t for t in TACTICS})
_TACTIC_LOOKUP.update({t.lower().replace(" ", "_"): t for t in TACTICS})


def canonical_tactic(name: str) -> str:
    """Map display names and STIX/Sigma short names to the canonical display name."""
    try:
        return _TACTIC_LOOKUP[name.strip().lower()]
    except (KeyError, AttributeError):
        raise UnknownTactic(name) from None


def tactic_stage(tactic_name: str) -> StageLabel:
    return _STAGE_OF[canonical_tactic(tactic_name)]


def tactic_position(tactic_name: str) -> int:
    return TACTICS.index(canonical_tactic(tactic_name))


def parent_id(technique_id: str) -> str:
    return technique_id.split(".", 1)[0]


def _tactic_of(item: Any) -> str:
    if hasattr(item, "candidate"):
        item = item.candidate
    if isinstance(item, Mapping):
        return item["tactic"]
    return item.tactic


def order_by_attack_stage(candidates: Iterable[Any]) -> list[Any]:
    """Stable sort by (stage, matrix column within stage, original position).

    Accepts anything carrying a ``tactic`` attribute (or key), including
    judged candidates wrapping one.
    """
    return sorted(candidates, key=lambda c: tactic_position(_tactic_of(c)))


# -- catalog -----------------------------------------------------------------

@dataclass(frozen=True)
class TechniqueEntry:
    technique_id: str
    name: str
    tactics: tuple[str, ...]
    description: str
    is_subtechnique: bool = False

    def __post_init__(self):
        if not TECHNIQUE_ID_RE.fullmatch(self.technique_id or ""):
            raise SchemaViolation(f"technique {self.technique_id!r}", "bad technique_id")
        if not self.tactics:
            raise SchemaViolation(self.technique_id, "tactics must be non-empty")
        for t in self.tactics:
            if t not in _STAGE_OF:
                raise SchemaViolation(self.technique_id, f"unknown tactic {t!r}")
        if not (self.description or "").strip():
            raise SchemaViolation(self.technique_id, "description must be non-empty")


@dataclass(frozen=True)
class TechniqueCatalog:
    entries: tuple[TechniqueEntry, ...]
    version_label: str = ""
    tactic_index: dict[str, tuple[str, ...]] = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        by_id: dict[str, TechniqueEntry] = {}
        index: dict[str, list[str]] = {}
        for e in self.entries:
            if e.technique_id in by_id:
                raise SchemaViolation(e.technique_id, "duplicate technique_id")
            by_id[e.technique_id] = e
            for t in e.tactics:
                index.setdefault(t, []).append(e.technique_id)
        ordered = {t: tuple(index[t]) for t in TACTICS if t in index}
        object.__setattr__(self, "tactic_index", ordered)
        object.__setattr__(self, "_by_id", by_id)
        names: dict[str, list[TechniqueEntry]] = {}
        for e in self.entries:
            names.setdefault(e.name.casefold(), []).append(e)
        object.__setattr__(self, "_by_name", names)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, technique_id: str) -> bool:
        return technique_id in self._by_id

    def get(self, technique_id: str) -> TechniqueEntry | None:
        return self._by_id.get(technique_id)

    def find_by_name(self, name: str) -> list[TechniqueEntry]:
        return list(self._by_name.get(name.strip().casefold(), ()))

    @property
    def tactics(self) -> tuple[str, ...]:
        return tuple(self.tactic_index)

    def to_json(self) -> dict:
        return {
            "version": self.version_label,
            "techniques": [
                {
                    "technique_id": e.technique_id,
                    "name": e.name,
                    "tactics": list(e.tactics),
                    "description": e.description,
                    "is_subtechnique": e.is_subtechnique,
                }
                for e in self.entries
            ],
        }


def _entries_from_simple(doc: Mapping, source: str) -> tuple[list[TechniqueEntry], str]:
    techniques = doc.get("techniques")
    if not isinstance(techniques, list):
        raise SchemaViolation(source, "'techniques' must be a list")
    entries = []
    for i, rec in enumerate(techniques):
        path = f"{source}:techniques[{i}]"
        if not isinstance(rec, Mapping):
            raise SchemaViolation(path, "record must be an object")
        for key in ("technique_id", "name", "tactics", "description"):
            if key not in rec:
                raise SchemaViolation(path, f"missing {key!r}")
        tactics = rec["tactics"]
        if not isinstance(tactics, list) or not tactics:
            raise SchemaViolation(path, "tactics must be a non-empty list")
        try:
            tactics = tuple(canonical_tactic(t) for t in tactics)
        except UnknownTactic as exc:
            raise SchemaViolation(path, str(exc)) from None
        tid = str(rec["technique_id"])
        entries.append(
            TechniqueEntry(
                technique_id=tid,
                name=str(rec["name"]),
                tactics=tactics,
                description=str(rec["description"]),
                is_subtechnique=bool(rec.get("is_subtechnique", "." in tid)),
            )
        )
    return entries, str(doc.get("version", ""))


def _entries_from_stix(doc: Mapping, source: str) -> tuple[list[TechniqueEntry], str]:
    entries = []
    version = "stix-bundle"
    for obj in doc.get("objects", []):
        if not isinstance(obj, Mapping):
            continue
        if obj.get("type") == "x-mitre-collection":
            version = f"{obj.get('name', 'collection')} {obj.get('x_mitre_version', '')}".strip()
        if obj.get("type") != "attack-pattern":
            continue
        if obj.get("revoked") or obj.get("x_mitre_deprecated"):
            continue
        tid = next(
            (
                ref.get("external_id")
                for ref in obj.get("external_references", [])
                if ref.get("source_name") == "mitre-attack"
            ),
            None,
        )
        if tid is None:
            continue
        tactics = []
        for phase in obj.get("kill_chain_phases", []):
            if phase.get("kill_chain_name") != "mitre-attack":
                continue
            name = _TACTIC_LOOKUP.get(str(phase.get("phase_name", "")).lower())
            if name and name not in tactics:
                tactics.append(name)
        if not tactics:
            # mobile/ICS phases or malformed objects: not part of the enterprise matrix
            continue
        description = (obj.get("description") or "").strip()
        if not description:
            raise SchemaViolation(f"{source}:{tid}", "description must be non-empty")
        entries.append(
            TechniqueEntry(
                technique_id=tid,
                name=str(obj.get("name", tid)),
                tactics=tuple(sorted(tactics, key=TACTICS.index)),
                description=description,
                is_subtechnique=bool(obj.get("x_mitre_is_subtechnique", "." in tid)),
            )
        )
    return entries, version


def fold_subtechnique_entries(entries: Sequence[TechniqueEntry]) -> list[TechniqueEntry]:
    """Merge sub-techniques into their parents (tactics unioned)."""
    out: dict[str, TechniqueEntry] = {}
    for e in entries:
        if not e.is_subtechnique:
            out[e.technique_id] = e
    for e in entries:
        if not e.is_subtechnique:
            continue
        pid = parent_id(e.technique_id)
        parent = out.get(pid)
        if parent is None:
            out[pid] = TechniqueEntry(pid, e.name.split(":")[0].strip(), e.tactics, e.description)
            continue
        merged = tuple(t for t in TACTICS if t in parent.tactics or t in e.tactics)
        if merged != parent.tactics:
            out[pid] = TechniqueEntry(pid, parent.name, merged, parent.description)
    return list(out.values())


def load_attack_matrix(source: str | Path | Mapping | list, *, fold_subtechniques: bool = False) -> TechniqueCatalog:
    """Load a STIX bundle or the simplified ``{"version", "techniques"}`` catalog
    (a bare list of technique records is accepted too)."""
    label = "<mapping>"
    if isinstance(source, (Mapping, list)):
        doc = source
    else:
        label = str(source)
        try:
            doc = json.loads(Path(source).read_text(encoding="utf-8"))
        except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise UnreadableSource(f"{source}: {exc}") from exc
    if isinstance(doc, list):
        doc = {"techniques": doc}
    if not isinstance(doc, Mapping):
        raise SchemaViolation(label, "top level must be an object or a list of techniques")
    if doc.get("type") == "bundle" or "objects" in doc:
        entries, version = _entries_from_stix(doc, label)
    elif "techniques" in doc:
        entries, version = _entries_from_simple(doc, label)
    else:
        raise SchemaViolation(label, "neither a STIX bundle nor a simplified catalog")
    if fold_subtechniques:
        entries = fold_subtechnique_entries(entries)
    if not entries:
        raise EmptyCatalog(label)
    return TechniqueCatalog(tuple(entries), version)


def load_sample_catalog(**kw) -> TechniqueCatalog:
    return load_attack_matrix(SAMPLE_CATALOG, **kw)


# -- vectors -------------------------------------------------------------------

@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if not vals:
            raise DimensionMismatch("embedding must have at least one dimension")
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("embedding values must be finite")
        object.__setattr__(self, "values", vals)

    @property
    def dims(self) -> int:
        return len(self.values)

    @property
    def norm(self) -> float:
        return kernels.vector_norm(array("d", self.values))

    def __len__(self) -> int:
        return len(self.values)


def as_vector(v: EmbeddingVector | Sequence[float]) -> EmbeddingVector:
    return v if isinstance(v, EmbeddingVector) else EmbeddingVector(tuple(v))


@dataclass(frozen=True)
class StoreRecord:
    key: str
    vector: EmbeddingVector
    payload: str


@dataclass(frozen=True)
class VectorStore:
    """Immutable key -> vector store with exhaustive cosine retrieval."""

    dims: int
    records: tuple[StoreRecord, ...]
    embedder_id: str = ""

    def __post_init__(self):
        seen = set()
        flat = array("d")
        for r in self.records:
            if r.vector.dims != self.dims:
                raise DimensionMismatch(f"{r.key}: {r.vector.dims} dims, store has {self.dims}")
            if r.key in seen:
                raise ValueError(f"duplicate store key {r.key!r}")
            seen.add(r.key)
            flat.extend(r.vector.values)
        norms = kernels.row_norms(flat, self.dims) if self.records else array("d")
        for r, n in zip(self.records, norms):
            if n == 0.0:
                raise ValueError(f"zero-norm vector for {r.key!r}")
        object.__setattr__(self, "_flat", flat)
        object.__setattr__(self, "_norms", norms)

    def __len__(self) -> int:
        return len(self.records)

    def keys(self) -> list[str]:
        return [r.key for r in self.records]

    def scores(self, query: EmbeddingVector | Sequence[float]) -> list[float]:
        """Cosine similarity of ``query`` against every record, in record order."""
        q = as_vector(query)
        if q.dims != self.dims:
            raise DimensionMismatch(f"query has {q.dims} dims, store has {self.dims}")
        qv = array("d", q.values)
        qnorm = kernels.vector_norm(qv)
        if qnorm == 0.0:
            raise ZeroNorm("query vector has zero norm")
        return list(kernels.cosine_scan(self._flat, self.dims, self._norms, qv, qnorm))

    def top_k(self, query: EmbeddingVector | Sequence[float], k: int) -> list[tuple[StoreRecord, float]]:
        """Top-k records by similarity; ties broken by ascending key."""
        if not self.records:
            raise EmptyStore("vector store is empty")
        if k < 1:
            raise ValueError("k must be >= 1")
        scored = zip(self.records, self.scores(query))
        ranked = sorted(scored, key=lambda rs: (-rs[1], rs[0].key))
        return ranked[:k]

    # JSON-lines persistence: header line then one record per line.
    def save(self, path: str | Path) -> None:
        lines = [json.dumps({"dims": self.dims, "embedder_id": self.embedder_id})]
        for r in self.records:
            lines.append(json.dumps({"key": r.key, "payload": r.payload, "vector": list(r.vector.values)}))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "VectorStore":
        try:
            lines = Path(path).read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise UnreadableSource(f"{path}: {exc}") from exc
        lines = [ln for ln in lines if ln.strip()]
        if not lines:
            raise SchemaViolation(str(path), "missing header line")
        try:
            header = json.loads(lines[0])
            dims = int(header["dims"])
        except (ValueError, KeyError, TypeError) as exc:
            raise SchemaViolation(f"{path}:1", f"bad header: {exc}") from None
        records = []
        for no, line in enumerate(lines[1:], start=2):
            try:
                rec = json.loads(line)
                records.append(StoreRecord(str(rec["key"]), EmbeddingVector(tuple(rec["vector"])), str(rec["payload"])))
            except (ValueError, KeyError, TypeError) as exc:
                raise SchemaViolation(f"{path}:{no}", str(exc)) from None
        return cls(dims, tuple(records), str(header.get("embedder_id", "")))


def build_technique_index(
    catalog: TechniqueCatalog,
    embedder: Callable[[str], EmbeddingVector | Sequence[float]],
    embedder_id: str = "",
) -> VectorStore:
    """Embed every technique description into a store keyed by technique id."""
    records = []
    dims = None
    for e in catalog.entries:
        try:
            vec = as_vector(embedder(e.description))
        except DimensionMismatch:
            raise
        except Exception as exc:
            raise EmbedderFailure(e.technique_id, exc) from exc
        if dims is None:
            dims = vec.dims
        elif vec.dims != dims:
            raise DimensionMismatch(f"{e.technique_id}: embedder returned {vec.dims} dims, expected {dims}")
        records.append(StoreRecord(e.technique_id, vec, e.description))
    return VectorStore(dims or 0, tuple(records), embedder_id)
