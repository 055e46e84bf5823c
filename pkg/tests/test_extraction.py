from __future__ import annotations

import json
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctirules.attack_kb import EmbeddingVector, StoreRecord, VectorStore, build_technique_index, load_attack_matrix, tactic_stage
from ctirules.errors import DimensionMismatch, ZeroNorm
from ctirules.extraction import (
    AttackIntel,
    ExtractionConfig,
    TechniqueCandidate,
    classify_part,
    cosine_similarity,
    extract_report,
    judge_candidate,
    resolve_technique,
    retrieve_similar_techniques,
)
from ctirules.gateway import BackendConfig, Gateway, ScriptedResponder, hash_embed
from ctirules.iocs import Part
from oracles import brute_topk, cosine

PART = Part(0, "The actor ran vssadmin to delete shadow copies.", (0, 0))


def test_classify_resolves_answer(catalog, scripted):
    gw = scripted({"technique_list": '{"technique": ["Impact, Inhibit System Recovery"]}'})
    cls = classify_part(PART, catalog, gw)
    assert [(c.technique_id, c.tactic, c.provenance) for c in cls.candidates] == [("T1490", "Impact", "icl")]


def test_classify_empty_and_unresolved(catalog, scripted):
    assert classify_part(PART, catalog, scripted({"technique_list": '{"technique": []}'})).candidates == []
    cls = classify_part(PART, catalog, scripted({"technique_list": '{"technique": ["Impact, Totally Made Up"]}'}))
    assert cls.candidates == [] and cls.unresolved == 1


def test_classify_prompt_carries_catalog_context(catalog, scripted):
    gw = scripted({"technique_list": '{"technique": []}'})
    classify_part(PART, catalog, gw)
    body = gw.responder.requests[0].user_messages[0]
    assert "T1490 Inhibit System Recovery" in body
    assert PART.text in body
    assert '{"technique": ["TACTIC, TECHNIQUE"' in body


def test_resolve_variants(catalog):
    assert resolve_technique("Defense Evasion, Valid Accounts", catalog) == ("T1078", "Valid Accounts", "Defense Evasion")
    assert resolve_technique("Impact, Valid Accounts", catalog) == ("T1078", "Valid Accounts", "Initial Access")
    assert resolve_technique("Credential Access, T1003.001", catalog)[0] == "T1003.001"
    assert resolve_technique("Phishing", catalog)[0] == "T1566"


def test_cosine_examples():
    assert cosine_similarity((1.0, 2.0, 3.0), (1.0, 2.0, 3.0)) == pytest.approx(1.0)
    assert cosine_similarity((1.0, 0.0), (0.0, 1.0)) == 0.0
    assert cosine_similarity((1.0, 2.0, 2.0), (2.0, 1.0, 2.0)) == pytest.approx(8 / 9, abs=1e-12)
    with pytest.raises(DimensionMismatch):
        cosine_similarity((1.0,), (1.0, 2.0))
    with pytest.raises(ZeroNorm):
        cosine_similarity((0.0, 0.0), (1.0, 2.0))


finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 8).flatmap(lambda n: st.tuples(st.lists(finite, min_size=n, max_size=n), st.lists(finite, min_size=n, max_size=n))))
def test_cosine_symmetry(pair):
    a, b = pair
    sa, sb = sum(x * x for x in a), sum(x * x for x in b)
    if sa == 0.0 or sb == 0.0 or math.isinf(sa) or math.isinf(sb):
        return  # zero norm after underflow is ZeroNorm, tested separately
    assert abs(cosine_similarity(a, b) - cosine_similarity(b, a)) < 1e-12


def test_retrieval_default_k(catalog, store):
    got = retrieve_similar_techniques(PART, store, hash_embed, catalog=catalog)
    assert len(got) == 3
    sims = [c.similarity for c in got]
    assert sims == sorted(sims, reverse=True)
    assert all(c.provenance == "retrieval" for c in got)


def test_retrieval_single_record(catalog):
    rec = StoreRecord("T1490", EmbeddingVector(tuple(hash_embed("totally unrelated words").values)), "")
    store = VectorStore(256, (rec,))
    got = retrieve_similar_techniques(PART, store, hash_embed, 1, catalog=catalog)
    assert [c.technique_id for c in got] == ["T1490"]
    assert len(retrieve_similar_techniques(PART, store, hash_embed, 3, catalog=catalog)) == 1


def test_retrieval_matches_full_scan(catalog, store):
    rng = random.Random(5)
    words = " ".join(e.description for e in catalog.entries).split()
    records = [(r.key, list(r.vector.values)) for r in store.records]
    for trial in range(30):
        text = " ".join(rng.choice(words) for _ in range(rng.randint(3, 20)))
        part = Part(trial, text, (0, 0))
        got = [(c.technique_id, c.similarity) for c in retrieve_similar_techniques(part, store, hash_embed, 3, catalog=catalog)]
        assert got == brute_topk(records, list(hash_embed(text).values), 3)


def test_retrieval_accepts_gateway(catalog, store):
    gw = Gateway(BackendConfig())
    a = retrieve_similar_techniques(PART, store, gw, catalog=catalog)
    b = retrieve_similar_techniques(PART, store, hash_embed, catalog=catalog)
    assert a == b


CAND = TechniqueCandidate("T1490", "Inhibit System Recovery", "Impact", "icl", (0,))


@pytest.mark.parametrize(
    "answer,verdict,flagged",
    [
        ('{"if_exist":"YES","reason":"report describes vssadmin deletion"}', "accepted", False),
        ('{"if_exist":"NO","reason":"no evidence"}', "rejected", False),
        ("garbage", "rejected", True),
    ],
)
def test_judge(answer, verdict, flagged, scripted):
    j = judge_candidate("report", CAND, "desc", scripted({"judgment": answer}))
    assert (j.verdict, j.flagged) == (verdict, flagged)
    assert j.reason


def test_judge_prompt_isolated(scripted):
    gw = scripted({"judgment": '{"if_exist":"YES","reason":"r"}'})
    judge_candidate("the whole report", CAND, "Adversaries may delete backups.", gw)
    req = gw.responder.requests[0]
    assert len(req.user_messages) == 1
    body = req.user_messages[0]
    assert "Impact, T1490 Inhibit System Recovery" in body and "the whole report" in body
    assert "Adversaries may delete backups." in body


# -- end to end ----------------------------------------------------------------------------

DRAKON = (
    "The operation began with a phishing email that linked to a fake browser update hosted at "
    "http://firefox-update.example.net/setup.exe. Victims who ran the installer received a backdoor. "
    "The backdoor tunnelled its traffic over DNS queries to resolver 198.51.100.7 for command and control. "
    "It collected host details and staged files for theft. "
    "Finally the malware cleared the Windows event logs under C:\\Windows\\System32\\winevt\\Logs to remove indicators."
)


def drakon_responder(request):
    body = request.user_messages[0]
    if request.schema_id == "ioc_list":
        return '{"ioc": ["firefox-update.example.net"]}'
    if request.schema_id == "technique_list":
        excerpt = body.split("Report excerpt:\n", 1)[1]
        out = []
        if "event logs" in excerpt:
            out.append("Defense Evasion, Indicator Removal")
        if "phishing" in excerpt:
            out.append("Initial Access, Phishing")
        if "DNS" in excerpt:
            out += ["Command and Control, Application Layer Protocol", "Discovery, Made Up Thing"]
        return json.dumps({"technique": out})
    if request.schema_id == "judgment":
        keep = any(k in body for k in ("T1070 ", "T1566 ", "T1071 "))
        return json.dumps({"if_exist": "YES" if keep else "NO", "reason": "evidence in report" if keep else "not described"})
    raise AssertionError(request.schema_id)


def test_extract_empty_report(catalog, store):
    intel = extract_report("   ", catalog, store, Gateway(BackendConfig(), responder=drakon_responder))
    assert intel.techniques == () and intel.rejected == ()


def test_extract_drakon_flow_with_replay(tmp_path, catalog, store):
    cfg = ExtractionConfig(report_id="drakon")
    recorder = Gateway(BackendConfig(), cache_dir=tmp_path, responder=drakon_responder)
    recorded = extract_report(DRAKON, catalog, store, recorder, cfg)
    replay = Gateway(BackendConfig(kind="replay", fixture_dir=str(tmp_path)))
    intel = extract_report(DRAKON, catalog, store, replay, cfg)
    assert replay.backend_calls > 0
    assert intel.to_json() == recorded.to_json()
    tactics = [j.tactic for j in intel.techniques]
    assert tactics.index("Initial Access") < tactics.index("Defense Evasion")
    assert set(intel.technique_ids()) == {"T1566", "T1071", "T1070"}
    assert intel.stats["unresolved"] == 1
    # warm cache: byte-identical and no backend calls
    warm = Gateway(BackendConfig(kind="replay", fixture_dir=str(tmp_path)), cache_dir=tmp_path)
    again = extract_report(DRAKON, catalog, store, warm, cfg)
    assert json.dumps(again.to_json()) == json.dumps(intel.to_json())
    assert warm.backend_calls == 0


def test_extract_invariants(catalog, store):
    intel = extract_report(DRAKON, catalog, store, Gateway(BackendConfig(), responder=drakon_responder))
    stages = [tactic_stage(j.tactic) for j in intel.techniques]
    assert stages == sorted(stages)
    accepted = set(intel.technique_ids())
    rejected = {j.candidate.technique_id for j in intel.rejected}
    assert not accepted & rejected
    merged = intel.stats["icl"] + intel.stats["retrieval"] + intel.stats["both"]
    assert len(accepted | rejected) == merged == intel.stats["accepted"] + intel.stats["rejected"]
    assert all(j.verdict == "accepted" for j in intel.techniques)


def test_failed_part_is_counted(catalog, store):
    def responder(request):
        if request.schema_id == "technique_list" and "DNS" in request.user_messages[0]:
            from ctirules.errors import BackendError

            raise BackendError(500, "boom")
        return drakon_responder(request)

    intel = extract_report(DRAKON, catalog, store, Gateway(BackendConfig(), responder=responder))
    assert intel.stats["failed_parts"] == 1


def test_ioc_model_failure_tolerated(catalog, store):
    def responder(request):
        if request.schema_id == "ioc_list":
            return "not json"
        return drakon_responder(request)

    intel = extract_report(DRAKON, catalog, store, Gateway(BackendConfig(), responder=responder))
    assert intel.stats["ioc_model_failed"] == 1
    assert intel.techniques


def test_fold_subtechniques_merges(catalog):
    recs = [e.__dict__ | {"tactics": list(e.tactics)} for e in catalog.entries]
    cat = load_attack_matrix(recs)
    store = build_technique_index(cat, hash_embed)

    def responder(request):
        if request.schema_id == "technique_list":
            return '{"technique": ["Credential Access, LSASS Memory", "Credential Access, OS Credential Dumping"]}'
        if request.schema_id == "judgment":
            return '{"if_exist":"YES","reason":"ok"}'
        return '{"ioc": []}'

    cfg = ExtractionConfig(k=1, fold_subtechniques=True)
    intel = extract_report("Credentials were dumped from LSASS memory.", cat, store, Gateway(BackendConfig(), responder=responder), cfg)
    assert "T1003.001" not in intel.technique_ids()
    assert "T1003" in intel.technique_ids()


def test_intel_json_round_trip(catalog, store):
    intel = extract_report(DRAKON, catalog, store, Gateway(BackendConfig(), responder=drakon_responder))
    again = AttackIntel.from_json(json.loads(json.dumps(intel.to_json())))
    assert again == intel
    assert "Initial Access, T1566 Phishing: evidence in report" in intel.ttp_block().splitlines()
