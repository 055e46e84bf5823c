"""Procedure generation over a technique-procedure corpus and entity graph."""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .attack_kb import TECHNIQUE_ID_RE, StoreRecord, TechniqueCatalog, VectorStore, as_vector
from .errors import CtiError, EmptyCorpus, EmptyIntel, PayloadError, SchemaViolation, UnreadableSource
from .extraction import AttackIntel
from .iocs import regex_iocs
from .payloads import parse_json_payload
from .prompts import procedure_prompt, triple_prompt

log = logging.getLogger(__name__)

VERB_LEXICON_PATH = Path(__file__).with_name("data") / "attack_verbs.txt"
TRIPLE_CAP = 8
COMPLETENESS_LABELS = ("complete", "partial", "generic")


@lru_cache(maxsize=1)
def attack_verbs() -> frozenset[str]:
    lines = VERB_LEXICON_PATH.read_text(encoding="utf-8").splitlines()
    return frozenset(ln.strip() for ln in lines if ln.strip() and not ln.startswith("#"))


# -- corpus ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProcedureExample:
    technique_id: str
    text: str

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("procedure text must be non-empty")


@dataclass(frozen=True)
class ProcedureCorpus:
    examples: tuple[ProcedureExample, ...]
    duplicates_dropped: int = 0

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, i: int) -> ProcedureExample:
        return self.examples[i]


def load_procedure_corpus(path: str | Path, catalog: TechniqueCatalog | None = None) -> ProcedureCorpus:
    """Read JSON-lines ``{"technique_id", "text"}``; identical pairs are dropped."""
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise UnreadableSource(f"{path}: {exc}") from exc
    examples: list[ProcedureExample] = []
    seen: set[tuple[str, str]] = set()
    dropped = 0
    for no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except ValueError as exc:
            raise SchemaViolation(f"{path}:{no}", f"invalid JSON: {exc}") from None
        if not isinstance(obj, dict):
            raise SchemaViolation(f"{path}:{no}", "expected a JSON object")
        tid, text = obj.get("technique_id"), obj.get("text")
        if not isinstance(tid, str) or not TECHNIQUE_ID_RE.fullmatch(tid):
            raise SchemaViolation(f"{path}:{no}", "missing or malformed 'technique_id'")
        if not isinstance(text, str) or not text.strip():
            raise SchemaViolation(f"{path}:{no}", "missing or empty 'text'")
        if catalog is not None and tid not in catalog:
            raise SchemaViolation(f"{path}:{no}", f"technique {tid} not in catalog")
        if (tid, text) in seen:
            dropped += 1
            continue
        seen.add((tid, text))
        examples.append(ProcedureExample(tid, text))
    return ProcedureCorpus(tuple(examples), dropped)


# -- token-level heuristics -------------------------------------------------------------

_TOKEN_RE = re.compile(r"[A-Za-z0-9](?:[\w\-./\\:]*\w)?")
_SENT_BREAK = re.compile(r"[.!?;]\s")


@dataclass(frozen=True)
class Token:
    text: str
    start: int
    end: int


def tokens(text: str) -> list[Token]:
    return [Token(m.group(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


def _is_verb(tok: Token) -> bool:
    return tok.text.lower() in attack_verbs()


def _strong_name(word: str) -> bool:
    """Identifier-like tokens: digits mixed with letters, or an all-caps acronym."""
    has_alpha = any(c.isalpha() for c in word)
    if has_alpha and any(c.isdigit() for c in word):
        return True
    letters = [c for c in word if c.isalpha()]
    return len(letters) >= 2 and all(c.isupper() for c in letters)


def _sentence_initial(text: str, tok: Token) -> bool:
    before = text[: tok.start].rstrip()
    return not before or before[-1] in ".!?:;\n"


def entity_tokens(text: str) -> list[Token]:
    """Tokens that read as named entities.

    A sentence-initial capitalised word only counts when a lexicon verb
    follows it directly (``Attacker downloads``).
    """
    toks = tokens(text)
    ioc_spans = [i.span for i in regex_iocs(text)]
    out = []
    for idx, tok in enumerate(toks):
        if _is_verb(tok):
            continue
        if any(a <= tok.start < b for a, b in ioc_spans) or _strong_name(tok.text):
            out.append(tok)
        elif tok.text[0].isupper():
            if not _sentence_initial(text, tok):
                out.append(tok)
            elif idx + 1 < len(toks) and _is_verb(toks[idx + 1]):
                out.append(tok)
    return out


def _merge_adjacent(text: str, toks: Sequence[Token]) -> list[Token]:
    """Join entity tokens separated only by a single space (``Cobalt Strike``)."""
    merged: list[Token] = []
    for tok in toks:
        if merged and text[merged[-1].end : tok.start] == " ":
            prev = merged[-1]
            merged[-1] = Token(text[prev.start : tok.end], prev.start, tok.end)
        else:
            merged.append(tok)
    return merged


def _category(text: str, span: Token) -> str:
    for ioc in regex_iocs(span.text):
        if ioc.span == (0, len(span.text)):
            return f"ioc:{ioc.kind}"
    return "identifier" if _strong_name(span.text) else "name"


def extract_triples_heuristic(text: str, cap: int = TRIPLE_CAP) -> list[tuple[str, str, str, str, str]]:
    """(src, verb, dst, src_category, dst_category) from capitalised spans around lexicon verbs."""
    ents = _merge_adjacent(text, entity_tokens(text))
    out = []
    for tok in tokens(text):
        if not _is_verb(tok):
            continue
        src = [e for e in ents if e.end <= tok.start and not _SENT_BREAK.search(text, e.end, tok.start)]
        dst = [e for e in ents if e.start >= tok.end and not _SENT_BREAK.search(text, tok.end, e.start)]
        if src and dst:
            s, d = src[-1], dst[0]
            out.append((s.text, tok.text.lower(), d.text, _category(text, s), _category(text, d)))
            if len(out) >= cap:
                break
    return out


# -- entity graph -------------------------------------------------------------------

@dataclass(frozen=True)
class EntityGraph:
    entities: tuple[tuple[str, str, str], ...]  # (entity_id, label, category)
    relations: tuple[tuple[str, str, str, int], ...]  # (src_id, verb, dst_id, example_idx)
    skipped: int = 0

    def __post_init__(self):
        ids = {e[0] for e in self.entities}
        if len(ids) != len(self.entities):
            raise ValueError("duplicate entity ids")
        for src, verb, dst, _ in self.relations:
            if src not in ids or dst not in ids:
                raise ValueError(f"relation endpoint missing: {src}->{dst}")
            if src == dst and not verb:
                raise ValueError("self-loop with empty verb")

    def label(self, entity_id: str) -> str:
        return self._labels()[entity_id]

    def _labels(self) -> dict[str, str]:
        return {eid: label for eid, label, _ in self.entities}

    def relation_texts(self) -> list[tuple[str, str, str, int]]:
        labels = self._labels()
        return [(labels[s], v, labels[d], i) for s, v, d, i in self.relations]

    def to_json(self) -> dict:
        return {
            "entities": [{"id": i, "label": l, "category": c} for i, l, c in self.entities],
            "relations": [{"src": s, "verb": v, "dst": d, "example": i} for s, v, d, i in self.relations],
            "skipped": self.skipped,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EntityGraph":
        try:
            ents = tuple((e["id"], e["label"], e["category"]) for e in obj["entities"])
            rels = tuple((r["src"], r["verb"], r["dst"], int(r["example"])) for r in obj["relations"])
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaViolation("graph", f"malformed graph JSON: {exc}") from None
        return cls(ents, rels, int(obj.get("skipped", 0)))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "EntityGraph":
        try:
            return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, ValueError) as exc:
            raise UnreadableSource(f"{path}: {exc}") from exc


def _model_triples(text: str, gateway) -> list[tuple[str, str, str, str, str]]:
    system, messages = triple_prompt(text)
    triples = parse_json_payload(gateway.complete(system, messages, "triple_list"), "triple_list")
    return [(s, v, d, "model", "model") for s, v, d in triples[:TRIPLE_CAP] if s.strip() and d.strip()]


def build_procedure_graph(corpus: ProcedureCorpus | Sequence[ProcedureExample], gateway=None, *, max_workers: int = 4) -> EntityGraph:
    """Entity-relationship graph over the corpus.

    The heuristic extractor is used when ``gateway`` is None; otherwise the
    model extracts triples and examples whose call fails are skipped and
    counted.
    """
    examples = list(corpus)
    if not examples:
        raise EmptyCorpus("procedure corpus is empty")
    use_model = gateway is not None

    def work(ex: ProcedureExample):
        if not use_model:
            return extract_triples_heuristic(ex.text)
        try:
            return _model_triples(ex.text, gateway)
        except CtiError as exc:
            log.warning("graph extraction skipped one example: %s", exc)
            return None

    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        results = list(pool.map(work, examples))

    ids: dict[str, str] = {}
    entities: list[tuple[str, str, str]] = []
    relations: list[tuple[str, str, str, int]] = []
    seen_rel = set()
    skipped = 0

    def entity(label: str, category: str) -> str:
        key = label.strip().casefold()
        if key not in ids:
            ids[key] = f"e{len(entities)}"
            entities.append((ids[key], label.strip(), category))
        return ids[key]

    for idx, triples in enumerate(results):
        if triples is None:
            skipped += 1
            continue
        for s, v, d, sc, dc in triples:
            rel = (entity(s, sc), v.strip().lower(), entity(d, dc), idx)
            if rel not in seen_rel:
                seen_rel.add(rel)
                relations.append(rel)
    return EntityGraph(tuple(entities), tuple(relations), skipped)


# -- retrieval context ----------------------------------------------------------------

@dataclass(frozen=True)
class ProcedureContext:
    text: str
    selected: dict[str, tuple[int, ...]]
    truncated: bool = False

    @property
    def empty(self) -> bool:
        return not self.text


@lru_cache(maxsize=4)
def _corpus_store(texts: tuple[str, ...], embed: Callable) -> VectorStore:
    vecs = [as_vector(embed(t)) for t in texts]
    records = tuple(StoreRecord(f"{i:09d}", v, "") for i, v in enumerate(vecs))
    return VectorStore(vecs[0].dims, records)


def nearest_examples(query: str, corpus: ProcedureCorpus, embed: Callable, k: int, exclude: Iterable[int] = ()) -> list[int]:
    """Corpus indices most similar to ``query``; ties go to the lower index."""
    if k <= 0 or not len(corpus):
        return []
    store = _corpus_store(tuple(e.text for e in corpus), embed)
    skip = set(exclude)
    ranked = store.top_k(as_vector(embed(query)), len(store))
    return [int(r.key) for r, _ in ranked if int(r.key) not in skip][:k]


def retrieve_procedure_context(
    intel: AttackIntel,
    corpus: ProcedureCorpus,
    graph: EntityGraph | None,
    embedder,
    k_per_technique: int = 3,
    *,
    char_budget: int = 4000,
) -> ProcedureContext:
    """Per accepted technique: corpus examples with the same id, then the
    nearest examples by cosine, followed by graph relations whose endpoints
    occur in the selected examples. Output never exceeds ``char_budget``.
    """
    if not intel.techniques:
        raise EmptyIntel("intel has no accepted techniques")
    embed = getattr(embedder, "embed", None) or embedder
    blocks: list[str] = []
    selected: dict[str, tuple[int, ...]] = {}
    chosen_all: set[int] = set()
    for judged in intel.techniques:
        cand = judged.candidate
        exact = [i for i, ex in enumerate(corpus) if ex.technique_id == cand.technique_id][:k_per_technique]
        fill = k_per_technique - len(exact)
        query = f"{cand.technique_name}. {judged.reason}"
        near = nearest_examples(query, corpus, embed, fill, exact) if fill > 0 else []
        picks = tuple(exact + near)
        selected[cand.technique_id] = picks
        chosen_all.update(picks)
        lines = [f"{cand.technique_id} {cand.technique_name}:"]
        lines += [f"- {corpus[i].text}" for i in picks]
        blocks.append("\n".join(lines))
    if graph is not None and chosen_all:
        texts = [corpus[i].text.casefold() for i in sorted(chosen_all)]
        rels = []
        for s, v, d, _ in graph.relation_texts():
            line = f"- {s} {v} {d}"
            if line not in rels and any(s.casefold() in t and d.casefold() in t for t in texts):
                rels.append(line)
        if rels:
            blocks.append("Relations:\n" + "\n".join(rels))
    out = ""
    truncated = False
    for block in blocks:
        piece = block if not out else "\n\n" + block
        if len(out) + len(piece) <= char_budget:
            out += piece
            continue
        truncated = True
        for line in piece.split("\n"):
            add = line if not out else "\n" + line
            if len(out) + len(add) > char_budget:
                break
            out += add
        break
    return ProcedureContext(out.strip("\n"), selected, truncated)


# -- generation -----------------------------------------------------------------------

@dataclass(frozen=True)
class ProcedureStep:
    ordinal: int
    text: str
    entity: str | None = None
    relationship: str | None = None
    action: str | None = None

    def __post_init__(self):
        if self.ordinal < 1:
            raise ValueError("ordinal must be positive")

    def render(self) -> str:
        return f"{self.ordinal}. {self.text}"


@dataclass
class ProcedureResult:
    steps: list[ProcedureStep]
    diagnostics: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return procedures_to_json(self.steps)


_ORDINAL_RE = re.compile(r"^\s*(\d+)\s*[.)]\s*")


def analyze_step(text: str) -> tuple[str | None, str | None, str | None]:
    """(entity, relationship, action) spans found in a procedure sentence."""
    toks = tokens(text)
    verb_idx = next((i for i, t in enumerate(toks) if _is_verb(t)), None)
    ents = _merge_adjacent(text, entity_tokens(text))
    entity = ents[0].text if ents else None
    if verb_idx is None:
        return entity, None, None
    verb = toks[verb_idx]
    rest = text[verb.end :]
    stop = _SENT_BREAK.search(rest)
    obj = rest[: stop.start() if stop else len(rest)].strip().rstrip(".!?;,")
    action = f"{verb.text} {obj}" if obj and tokens(obj) else None
    return entity, verb.text, action


def make_step(ordinal: int, text: str) -> ProcedureStep:
    entity, rel, action = analyze_step(text)
    return ProcedureStep(ordinal, text, entity, rel, action)


def parse_procedure_steps(items: Sequence[str]) -> ProcedureResult:
    """Strip leading numerals and renumber 1..n when they are not contiguous."""
    texts, ordinals = [], []
    for item in items:
        m = _ORDINAL_RE.match(item)
        ordinals.append(int(m.group(1)) if m else None)
        texts.append(item[m.end() :].strip() if m else item.strip())
    diagnostics = []
    expected = list(range(1, len(items) + 1))
    if ordinals != expected:
        given = ",".join("?" if o is None else str(o) for o in ordinals)
        diagnostics.append(f"step numbering {given} renumbered to 1..{len(items)}")
    steps = [make_step(i, t) for i, t in enumerate(texts, start=1) if t]
    if len(steps) != len(texts):
        diagnostics.append("empty steps dropped")
        steps = [ProcedureStep(i, s.text, s.entity, s.relationship, s.action) for i, s in enumerate(steps, start=1)]
    return ProcedureResult(steps, diagnostics)


def generate_procedures(report_text: str, intel: AttackIntel, context: ProcedureContext | str, gateway) -> ProcedureResult:
    ctx = context.text if isinstance(context, ProcedureContext) else context
    system, messages = procedure_prompt(report_text, intel.ttp_block(), ctx)
    raw = gateway.complete(system, messages, "procedure_list")
    try:
        items = parse_json_payload(raw, "procedure_list")
    except PayloadError as exc:
        return ProcedureResult([], [f"unparseable procedure output: {exc}"])
    return parse_procedure_steps(items)


def score_procedure_completeness(step: ProcedureStep | str) -> str:
    """complete: entity, relationship and action; partial: two; generic: fewer."""
    text = step.text if isinstance(step, ProcedureStep) else step
    if not text.strip():
        raise ValueError("step text must be non-empty")
    found = sum(x is not None for x in analyze_step(text))
    return "complete" if found == 3 else "partial" if found == 2 else "generic"


def procedures_to_json(steps: Sequence[ProcedureStep]) -> dict:
    return {"procedure": [s.render() for s in steps]}


def completeness_sidecar(steps: Sequence[ProcedureStep]) -> dict:
    return {"completeness": [score_procedure_completeness(s) for s in steps]}


PROCEDURE_ITEM_RE = re.compile(r"^[1-9]\d*\. \S")


def validate_procedure_json(obj) -> list[str]:
    """Problems with a ``{"procedure": ["1. ...", ...]}`` document (empty when valid)."""
    if not isinstance(obj, dict) or set(obj) != {"procedure"}:
        return ["document must be an object with the single key 'procedure'"]
    items = obj["procedure"]
    if not isinstance(items, list):
        return ["'procedure' must be a list"]
    problems = []
    for i, item in enumerate(items, start=1):
        if not isinstance(item, str) or not PROCEDURE_ITEM_RE.match(item):
            problems.append(f"item {i} is not a numbered step")
        elif not item.startswith(f"{i}. "):
            problems.append(f"item {i} is numbered out of sequence")
    return problems
