from __future__ import annotations

import json
import threading

import pytest
import requests
from hypothesis import given, settings
from hypothesis import strategies as st

from ctirules.errors import BackendError, EmptyText, FixtureMissing, RetriesExhausted
from ctirules.extraction import cosine_similarity
from ctirules.gateway import (
    BackendConfig,
    ChatRequest,
    Gateway,
    ScriptedResponder,
    chat_complete,
    embed_text,
    fingerprint,
    hash_embed,
    tokenize,
)
from oracles import bag_cosine

REQ = ChatRequest("m", "sys", ("hello",), 0.0, "ioc_list")


def test_request_invariants():
    with pytest.raises(ValueError):
        ChatRequest("m", "s", ())
    assert ChatRequest("m", "s", ["x"]).temperature == 0.0
    assert Gateway(BackendConfig()).request("s", ["u"]).temperature == 0.0


def test_fingerprint_properties():
    a = ChatRequest("m", "s", ("one", "two"))
    assert fingerprint(a) == fingerprint(ChatRequest("m", "s", ("one", "two")))
    assert fingerprint(a) != fingerprint(ChatRequest("m", "s", ("one", "two"), 0.5))
    assert fingerprint(a) != fingerprint(ChatRequest("m", "s", ("two", "one")))
    assert fingerprint(a) != fingerprint(ChatRequest("m2", "s", ("one", "two")))
    # parsing schema does not change the call
    assert fingerprint(a) == fingerprint(ChatRequest("m", "s", ("one", "two"), 0.0, "judgment"))
    assert len(fingerprint(a)) == 64


def test_replay_fixture_identity(tmp_path):
    (tmp_path / f"{fingerprint(REQ)}.txt").write_text('{"ioc": []}')
    resp = chat_complete(REQ, BackendConfig(kind="replay", fixture_dir=str(tmp_path)))
    assert resp.text == '{"ioc": []}'


def test_replay_missing_fixture(tmp_path):
    with pytest.raises(FixtureMissing) as exc:
        chat_complete(REQ, BackendConfig(kind="replay", fixture_dir=str(tmp_path)))
    assert exc.value.key == fingerprint(REQ)


def test_mock_canned_technique_answer():
    canned = '{"technique": ["Impact, Inhibit System Recovery"]}'
    gw = Gateway(BackendConfig(), responder=ScriptedResponder({"technique_list": canned}))
    assert gw.complete("s", ["u"], "technique_list") == canned


def test_scripted_list_repeats_last_and_records():
    r = ScriptedResponder({None: ["a", "b"]})
    gw = Gateway(BackendConfig(), responder=r)
    assert [gw.complete("s", [f"u{i}"]) for i in range(3)] == ["a", "b", "b"]
    assert len(r.requests) == 3


def test_cache_round_trip(tmp_path):
    calls = []

    def responder(req):
        calls.append(req)
        return "answer"

    gw = Gateway(BackendConfig(), cache_dir=tmp_path, responder=responder)
    first = gw.chat(REQ)
    second = gw.chat(REQ)
    assert first.text == second.text == "answer"
    assert not first.cached and second.cached
    assert gw.backend_calls == 1 and gw.cache_hits == 1
    assert len(calls) == 1
    assert (tmp_path / f"{fingerprint(REQ)}.txt").read_text() == "answer"
    # a fresh gateway on the same cache makes zero backend calls
    gw2 = Gateway(BackendConfig(), cache_dir=tmp_path, responder=responder)
    gw2.chat(REQ)
    assert gw2.backend_calls == 0


def test_cache_feeds_replay(tmp_path):
    Gateway(BackendConfig(), cache_dir=tmp_path, responder=lambda r: "x").chat(REQ)
    assert chat_complete(REQ, BackendConfig(kind="replay", fixture_dir=str(tmp_path))).text == "x"


def test_parallelism_bounded():
    active = 0
    peak = 0
    lock = threading.Lock()
    gate = threading.Event()

    def responder(req):
        nonlocal active, peak
        with lock:
            active += 1
            peak = max(peak, active)
        gate.wait(0.05)
        with lock:
            active -= 1
        return "ok"

    gw = Gateway(BackendConfig(max_parallel=2), responder=responder)
    threads = [threading.Thread(target=gw.complete, args=("s", [f"m{i}"])) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert peak <= 2
    assert gw.backend_calls == 8


class FakeResponse:
    def __init__(self, status, payload):
        self.status_code = status
        self._payload = payload
        self.text = json.dumps(payload)

    def json(self):
        return self._payload


class FakeSession:
    def __init__(self, outcomes):
        self.outcomes = list(outcomes)
        self.posts = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.posts.append((url, json, headers))
        out = self.outcomes.pop(0) if len(self.outcomes) > 1 else self.outcomes[0]
        if isinstance(out, Exception):
            raise out
        return out


def _http(session, **kw):
    sleeps = []
    cfg = BackendConfig(kind="http_api", endpoint="http://127.0.0.1:9/v1/chat/completions", **kw)
    return Gateway(cfg, session=session, sleep=sleeps.append), sleeps


def test_http_unreachable_exhausts_retries():
    session = FakeSession([requests.ConnectionError("refused")])
    gw, sleeps = _http(session, retry_limit=2)
    with pytest.raises(RetriesExhausted) as exc:
        gw.chat(REQ)
    assert exc.value.attempts == 3
    assert len(session.posts) == 3
    assert sleeps == [1.0, 2.0]


def test_http_real_unreachable_endpoint():
    cfg = BackendConfig(kind="http_api", endpoint="http://127.0.0.1:9/none", retry_limit=2, timeout=1.0)
    gw = Gateway(cfg, sleep=lambda s: None)
    with pytest.raises(RetriesExhausted):
        gw.chat(REQ)
    assert gw.http_attempts == 3


def test_http_success_after_server_error():
    ok = FakeResponse(200, {"choices": [{"message": {"content": "hi"}}], "usage": {"prompt_tokens": 5, "completion_tokens": 1}})
    session = FakeSession([FakeResponse(503, {"error": "busy"}), ok])
    gw, sleeps = _http(session)
    resp = gw.chat(REQ)
    assert resp.text == "hi" and resp.prompt_tokens == 5 and resp.output_tokens == 1
    assert len(sleeps) == 1
    body = session.posts[-1][1]
    assert body["temperature"] == 0.0
    assert body["messages"][0] == {"role": "system", "content": "sys"}


def test_http_client_error_not_retried():
    session = FakeSession([FakeResponse(400, {"error": "bad"})])
    gw, _ = _http(session)
    with pytest.raises(BackendError) as exc:
        gw.chat(REQ)
    assert exc.value.status == 400
    assert len(session.posts) == 1


def test_http_api_key_header(monkeypatch):
    monkeypatch.setenv("CTI_TEST_KEY", "secret")
    ok = FakeResponse(200, {"choices": [{"message": {"content": "x"}}]})
    session = FakeSession([ok])
    gw, _ = _http(session, api_key_env="CTI_TEST_KEY")
    gw.chat(REQ)
    assert session.posts[0][2]["Authorization"] == "Bearer secret"


def test_backend_config_validation():
    with pytest.raises(ValueError):
        BackendConfig(kind="nope")
    with pytest.raises(ValueError):
        BackendConfig(kind="http_api")
    with pytest.raises(ValueError):
        BackendConfig(kind="replay")


# -- embeddings ---------------------------------------------------------------------

def test_embed_deterministic_and_normalised():
    cfg = BackendConfig()
    a, b = embed_text("abc", cfg), embed_text("abc", cfg)
    assert a == b
    assert abs(sum(x * x for x in a.values) - 1.0) < 1e-12
    assert a.dims == 256


def test_embed_empty():
    with pytest.raises(EmptyText):
        embed_text("", BackendConfig())
    with pytest.raises(EmptyText):
        hash_embed("!!! ---")


def test_embed_similarity_ordering_agrees_with_bag_oracle():
    base = "credential dumping lsass"
    near = "credential dumping lsass tool"
    far = "schedule task persistence"
    # oracle first: raw token bags
    assert bag_cosine(base, near) > bag_cosine(base, far)
    e = lambda t: hash_embed(t)  # noqa: E731
    assert cosine_similarity(e(base), e(near)) > cosine_similarity(e(base), e(far))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(["lsass", "dump", "task", "mimikatz", "shadow", "copy", "vss", "admin"]), min_size=1, max_size=12))
def test_hash_embed_of_permutation_is_identical(tokens):
    assert hash_embed(" ".join(tokens)) == hash_embed(" ".join(reversed(tokens)))


def test_tokenize():
    assert tokenize("Mimikatz.EXE dumped LSASS!") == ["mimikatz", "exe", "dumped", "lsass"]


def test_http_embeddings_endpoint():
    session = FakeSession([FakeResponse(200, {"data": [{"embedding": [0.5, 0.5]}]})])
    cfg = BackendConfig(embed_endpoint="http://127.0.0.1:9/v1/embeddings")
    gw = Gateway(cfg, session=session, responder=lambda r: "")
    assert gw.embed("x").values == (0.5, 0.5)
    assert gw.embedder_id == "http:text-embedding-ada-002"
