from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctirules.attack_kb import (
    TACTICS,
    EmbeddingVector,
    StageLabel,
    StoreRecord,
    VectorStore,
    build_technique_index,
    load_attack_matrix,
    order_by_attack_stage,
    tactic_stage,
)
from ctirules.errors import (
    DimensionMismatch,
    EmbedderFailure,
    EmptyCatalog,
    EmptyStore,
    SchemaViolation,
    UnknownTactic,
    UnreadableSource,
)
from ctirules.gateway import hash_embed
from oracles import brute_topk

T1490 = {
    "technique_id": "T1490",
    "name": "Inhibit System Recovery",
    "tactics": ["Impact"],
    "description": "Adversaries may delete or remove built-in data and turn off services designed to aid in recovery.",
}


def test_single_record_catalog():
    cat = load_attack_matrix([T1490])
    assert len(cat) == 1
    assert cat.tactic_index == {"Impact": ("T1490",)}
    assert cat.get("T1490").name == "Inhibit System Recovery"


def test_wrapped_simple_catalog_from_file(tmp_path):
    p = tmp_path / "cat.json"
    p.write_text(json.dumps({"version": "v1", "techniques": [T1490]}))
    cat = load_attack_matrix(p)
    assert cat.version_label == "v1"
    assert "T1490" in cat


def test_sample_catalog_has_fourteen_tactics(catalog):
    assert catalog.tactics == TACTICS
    assert len(catalog.tactics) == 14


def test_tactic_index_bidirectional(catalog):
    for tactic, ids in catalog.tactic_index.items():
        for tid in ids:
            assert tactic in catalog.get(tid).tactics
    for e in catalog.entries:
        for t in e.tactics:
            assert e.technique_id in catalog.tactic_index[t]


def test_empty_tactics_rejected():
    with pytest.raises(SchemaViolation):
        load_attack_matrix([dict(T1490, tactics=[])])


def test_bad_technique_id_rejected():
    with pytest.raises((SchemaViolation, ValueError)):
        load_attack_matrix([dict(T1490, technique_id="X1490")])


def test_duplicate_ids_rejected():
    with pytest.raises(SchemaViolation):
        load_attack_matrix([T1490, T1490])


def test_unknown_tactic_in_record():
    with pytest.raises(SchemaViolation):
        load_attack_matrix([dict(T1490, tactics=["Phishing"])])


def test_empty_catalog_and_unreadable(tmp_path):
    with pytest.raises(EmptyCatalog):
        load_attack_matrix({"techniques": []})
    with pytest.raises(UnreadableSource):
        load_attack_matrix(tmp_path / "missing.json")


def _stix(objects):
    return {"type": "bundle", "objects": objects}


def _pattern(tid, name, phases, desc="Some description.", **extra):
    return {
        "type": "attack-pattern",
        "name": name,
        "description": desc,
        "external_references": [{"source_name": "mitre-attack", "external_id": tid}],
        "kill_chain_phases": [{"kill_chain_name": "mitre-attack", "phase_name": p} for p in phases],
        **extra,
    }


def test_stix_bundle_parsing():
    cat = load_attack_matrix(
        _stix(
            [
                {"type": "x-mitre-collection", "name": "Enterprise ATT&CK", "x_mitre_version": "14.1"},
                _pattern("T1490", "Inhibit System Recovery", ["impact"]),
                _pattern("T1003.001", "LSASS Memory", ["credential-access"], x_mitre_is_subtechnique=True),
                _pattern("T1078", "Valid Accounts", ["privilege-escalation", "initial-access"]),
                _pattern("T9999", "Old", ["impact"], revoked=True),
                _pattern("T1111", "No phases", []),
                {"type": "malware", "name": "x"},
            ]
        )
    )
    assert cat.version_label == "Enterprise ATT&CK 14.1"
    assert [e.technique_id for e in cat.entries] == ["T1490", "T1003.001", "T1078"]
    assert cat.get("T1078").tactics == ("Initial Access", "Privilege Escalation")
    assert cat.get("T1003.001").is_subtechnique


def test_fold_subtechniques():
    recs = [T1490, dict(T1490, technique_id="T1490.001", name="Sub", tactics=["Defense Evasion"])]
    cat = load_attack_matrix(recs, fold_subtechniques=True)
    assert [e.technique_id for e in cat.entries] == ["T1490"]
    assert cat.get("T1490").tactics == ("Defense Evasion", "Impact")


# -- stages --------------------------------------------------------------------------

def test_stage_examples():
    assert tactic_stage("Initial Access") is StageLabel.Early
    assert tactic_stage("Lateral Movement") is StageLabel.Moving
    assert tactic_stage("initial-access") is StageLabel.Early
    with pytest.raises(UnknownTactic):
        tactic_stage("Phishing")


def test_stage_partition_sizes():
    sizes = {s: 0 for s in StageLabel}
    for t in TACTICS:
        sizes[tactic_stage(t)] += 1
    assert [sizes[s] for s in StageLabel] == [3, 5, 2, 4]


@dataclass
class Cand:
    name: str
    tactic: str


def test_order_examples():
    out = order_by_attack_stage([Cand("i", "Impact"), Cand("a", "Initial Access"), Cand("e", "Execution")])
    assert [c.tactic for c in out] == ["Initial Access", "Execution", "Impact"]
    assert order_by_attack_stage([]) == []
    a, b = Cand("a", "Execution"), Cand("b", "Execution")
    assert order_by_attack_stage([a, b]) == [a, b]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(TACTICS), st.integers(0, 5)), max_size=30))
def test_order_is_sorted_permutation_and_idempotent(items):
    cands = [Cand(f"c{i}-{n}", t) for i, (t, n) in enumerate(items)]
    out = order_by_attack_stage(cands)
    assert sorted(map(id, out)) == sorted(map(id, cands))
    stages = [tactic_stage(c.tactic) for c in out]
    assert stages == sorted(stages)
    assert order_by_attack_stage(out) == out
    # stability within a tactic
    for t in TACTICS:
        assert [c for c in out if c.tactic == t] == [c for c in cands if c.tactic == t]


# -- vectors and store -------------------------------------------------------------------

def test_embedding_vector_rejects_non_finite():
    with pytest.raises(ValueError):
        EmbeddingVector((1.0, math.nan))
    with pytest.raises(ValueError):
        EmbeddingVector((math.inf,))


def test_index_of_three(catalog):
    sub = load_attack_matrix([e.__dict__ | {"tactics": list(e.tactics)} for e in catalog.entries[:3]])
    store = build_technique_index(sub, hash_embed)
    assert store.keys() == [e.technique_id for e in sub.entries]


def test_index_of_253_records():
    recs = [
        {"technique_id": f"T{1000 + i}", "name": f"Technique {i}", "tactics": [TACTICS[i % 14]], "description": f"does thing {i} with tool{i % 17}"}
        for i in range(253)
    ]
    store = build_technique_index(load_attack_matrix(recs), hash_embed)
    assert len(store) == 253


def test_mixed_dims_raise():
    recs = [dict(T1490), dict(T1490, technique_id="T1491", name="Defacement")]
    dims = iter([8, 16])

    def embed(_text):
        return [1.0] * next(dims)

    with pytest.raises(DimensionMismatch):
        build_technique_index(load_attack_matrix(recs), embed)


def test_embedder_failure_wrapped():
    def boom(_text):
        raise RuntimeError("down")

    with pytest.raises(EmbedderFailure):
        build_technique_index(load_attack_matrix([T1490]), boom)


def test_zero_vector_rejected():
    with pytest.raises(ValueError):
        VectorStore(2, (StoreRecord("a", EmbeddingVector((0.0, 0.0)), "p"),))


def test_store_persistence_round_trip(tmp_path, store):
    p = tmp_path / "store.jsonl"
    store.save(p)
    again = VectorStore.load(p)
    assert again == store
    assert again.embedder_id == "hash-bow-256"
    q = hash_embed("delete shadow copies")
    assert again.top_k(q, 3) == store.top_k(q, 3)


def test_empty_store_top_k():
    with pytest.raises(EmptyStore):
        VectorStore(3, ()).top_k([1.0, 0.0, 0.0], 1)


def test_query_dims_checked(store):
    with pytest.raises(DimensionMismatch):
        store.top_k([1.0, 2.0], 3)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.integers(1, 6), st.integers(1, 5), st.randoms(use_true_random=False))
def test_top_k_matches_brute_force(n, dims, k, rnd):
    records = []
    for i in range(n):
        vec = [float(rnd.randint(-2, 2)) for _ in range(dims)]
        if not any(vec):
            vec[0] = 1.0
        records.append((f"k{rnd.randint(0, 999):03d}-{i}", vec))
    query = [float(rnd.randint(-2, 2)) for _ in range(dims)]
    if not any(query):
        query[-1] = 1.0
    store = VectorStore(dims, tuple(StoreRecord(key, EmbeddingVector(tuple(v)), "") for key, v in records))
    got = [(r.key, s) for r, s in store.top_k(query, k)]
    assert got == brute_topk(records, query, k)


def test_ties_broken_by_key():
    recs = tuple(StoreRecord(key, EmbeddingVector((1.0, 0.0)), "") for key in ("b", "c", "a"))
    store = VectorStore(2, recs)
    assert [r.key for r, _ in store.top_k([1.0, 0.0], 2)] == ["a", "b"]
