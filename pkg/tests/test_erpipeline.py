import json

import httpx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmel.datamodel import EntityRecord, load_entities
from mmel.encoders import token_spans
from mmel.erpipeline import (
    FOLLOW_UP_PROMPT,
    NOT_FOUND,
    SYSTEM_PROMPT,
    ChatCompletionClient,
    ClientError,
    ERCache,
    ERPipeline,
    FixtureKBClient,
    FixtureLLMClient,
    FixtureMissError,
    RefusalDetector,
    RetryPolicy,
    TransportError,
    WikipediaClient,
    apply_builds,
    build_dynamic_er,
    build_static_er,
    clean_text,
    report_enhancement,
)
from mmel.erpipeline.clients import RateLimiter, call_with_retries


def test_clean_text_rule_example():
    assert clean_text("Trump[1]  is  a\tpolitician") == "Trump is a politician"


def test_clean_text_removes_nested_markers_and_controls():
    assert clean_text("a[[1]2] b​\x07c\n\nd") == "a bc d"


def test_clean_text_already_clean_is_unchanged():
    s = "Orette Bruce Golding is a former Jamaican politician."
    assert clean_text(s) == s


def test_clean_text_truncates_on_token_boundary():
    raw = " ".join(f"w{i}" for i in range(1000))
    out = clean_text(raw, max_tokens=256)
    assert out == " ".join(f"w{i}" for i in range(256))
    assert clean_text("Hello, world!", max_tokens=2) == "Hello,"


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet=st.sampled_from(list("ab1 []\t\n.,\x07​")), max_size=40), st.integers(0, 8))
def test_clean_text_idempotent_and_bounded(raw, k):
    once = clean_text(raw, k)
    assert clean_text(once, k) == once
    assert len(token_spans(once)) <= k


def test_refusal_detector():
    det = RefusalDetector.default()
    assert det.matches("Without more specific information, it is difficult to provide details.")
    assert not det.matches("She led a private company for decades.")
    with pytest.raises(ValueError):
        RefusalDetector(["  "])


def entity(qid, name):
    return EntityRecord(qid, name, "person", "", "property")


def test_static_uses_first_two_paragraphs():
    kb = FixtureKBClient({"A": "One[1].\n\nTwo.\n\nThree.", "B": None, "C": "[4]\n\n[5]"})
    assert build_static_er(entity("Q1", "A"), kb).er_text == "One. Two."
    assert build_static_er(entity("Q2", "B"), kb).reason == "not_found"
    assert build_static_er(entity("Q3", "C"), kb).reason == "empty_description"
    with pytest.raises(FixtureMissError):
        build_static_er(entity("Q4", "D"), kb)


def test_static_golden_fixtures(fixtures_dir):
    er = fixtures_dir / "er"
    kb = FixtureKBClient.from_file(er / "kb_pages.jsonl")
    golden = [json.loads(line) for line in (er / "static_golden.jsonl").read_text().splitlines()]
    for e, g in zip(load_entities(er / "entities.jsonl"), golden):
        b = build_static_er(e, kb)
        assert (b.er_text, b.dropped) == (g["er_text"], g["dropped"]), e.qid
        if b.er_text:
            assert len(token_spans(b.er_text)) <= 256


def refusal_fixture():
    first = [{"role": "system", "content": SYSTEM_PROMPT}, {"role": "user", "content": "A"}]
    refusal = "A is a private individual. Without more specific information, it is difficult to say."
    second = first + [{"role": "assistant", "content": refusal},
                      {"role": "user", "content": f"A is a painter. {FOLLOW_UP_PROMPT}"}]
    llm = FixtureLLMClient({json.dumps(first): refusal, json.dumps(second): "A is a Dutch painter[2]."})
    return llm, FixtureKBClient({"A": "A is a painter."})


def test_dynamic_follow_up_prepends_description():
    llm, kb = refusal_fixture()
    b = build_dynamic_er(entity("Q1", "A"), llm, kb, RefusalDetector.default())
    assert b.er_text == "A is a Dutch painter."
    assert len(b.rounds) == 2 and len(llm.calls) == 2
    assert llm.calls[1][-1]["content"] == f"A is a painter. {FOLLOW_UP_PROMPT}"


def test_dynamic_single_round_when_no_refusal():
    first = [{"role": "system", "content": SYSTEM_PROMPT}, {"role": "user", "content": "B"}]
    llm = FixtureLLMClient({json.dumps(first): "B is a   famous chemist."})
    kb = FixtureKBClient({})
    b = build_dynamic_er(entity("Q2", "B"), llm, kb, RefusalDetector.default())
    assert (b.er_text, len(b.rounds), kb.calls) == ("B is a famous chemist.", 1, [])


def test_dynamic_fixture_rounds(fixtures_dir):
    er = fixtures_dir / "er"
    llm = FixtureLLMClient.from_file(er / "llm_chat.jsonl")
    kb = FixtureKBClient.from_file(er / "kb_pages.jsonl")
    ents = {e.qid: e for e in load_entities(er / "entities.jsonl")}
    expected = [json.loads(line) for line in (er / "dynamic_expected.jsonl").read_text().splitlines()]
    det = RefusalDetector.default()
    builds = [build_dynamic_er(ents[x["qid"]], llm, kb, det) for x in expected]
    for b, x in zip(builds, expected):
        assert (len(b.rounds), b.er_text, b.dropped) == (x["rounds"], x["er_text"], x["dropped"])
        assert (len(b.rounds) == 2) == det.matches(b.rounds[0].response)
    report = report_enhancement(builds)["dynamic"]
    assert report["round2"] == 2 and report["total"] == 10 and report["dropped"] == 1


def test_cache_replay_makes_no_calls(tmp_path):
    llm, kb = refusal_fixture()
    ents = [entity("Q1", "A")]
    first = ERPipeline(kb, llm, RefusalDetector.default(), ERCache(tmp_path)).run(ents, "dynamic")
    calls = (len(llm.calls), len(kb.calls))
    again = ERPipeline(kb, llm, RefusalDetector.default(), ERCache(tmp_path)).run(ents, "dynamic")
    assert (len(llm.calls), len(kb.calls)) == calls
    assert again[0].cached and again[0].er_text.encode() == first[0].er_text.encode()
    assert report_enhancement(again)["dynamic"]["cached"] == 1
    # a different pipeline version misses the cache
    other = ERPipeline(kb, llm, RefusalDetector(["nope"]), ERCache(tmp_path))
    assert other.version != ERPipeline(kb, llm, RefusalDetector.default()).version


def test_parallel_run_keeps_order(fixtures_dir):
    er = fixtures_dir / "er"
    ents = load_entities(er / "entities.jsonl")
    serial = ERPipeline(FixtureKBClient.from_file(er / "kb_pages.jsonl")).run(ents, "static")
    parallel = ERPipeline(FixtureKBClient.from_file(er / "kb_pages.jsonl"), workers=4).run(ents, "static")
    assert serial == parallel
    kept = apply_builds(ents, serial)
    assert len(kept) == 18 and all(e.er_source == "static" and e.er_text for e in kept)


def test_dynamic_without_llm_is_an_error():
    with pytest.raises(ValueError):
        ERPipeline(FixtureKBClient({})).build(entity("Q1", "A"), "dynamic")


# -- live clients against a mock transport ----------------------------------

def wiki_handler(state):
    def handler(request: httpx.Request):
        state.append(request)
        title = request.url.params["titles"]
        if title == "Flaky" and len(state) < 3:
            return httpx.Response(503)
        if title == "Forbidden":
            return httpx.Response(403)
        if title == "Missing":
            return httpx.Response(200, json={"query": {"pages": [{"title": title, "missing": True}]}})
        extract = "First para.\n\n== History ==\nSecond para[1].\nThird."
        return httpx.Response(200, json={"query": {"pages": [{"title": title, "extract": extract}]}})
    return handler


def test_wikipedia_client_parsing_and_retry():
    state, sleeps = [], []
    http = httpx.Client(transport=httpx.MockTransport(wiki_handler(state)))
    client = WikipediaClient("https://kb.test/api.php", http=http, min_interval=0, sleep=sleeps.append)
    assert client.fetch_extract("Ada") == ["First para.", "Second para[1].", "Third."]
    assert state[0].url.params["prop"] == "extracts" and state[0].url.params["explaintext"] == "1"
    assert client.fetch_extract("Missing") is NOT_FOUND
    state.clear()
    assert client.fetch_extract("Flaky")[0] == "First para."
    assert sleeps == [0.5, 1.0]
    with pytest.raises(ClientError):
        client.fetch_extract("Forbidden")
    assert build_static_er(entity("Q1", "Ada"), client).er_text == "First para. Second para."


def test_chat_client_request_shape_and_errors(monkeypatch):
    seen = []

    def handler(request):
        seen.append(request)
        body = json.loads(request.content)
        if body["messages"][-1]["content"] == "boom":
            return httpx.Response(500)
        if body["messages"][-1]["content"] == "odd":
            return httpx.Response(200, json={"nothing": 1})
        return httpx.Response(200, json={"choices": [{"message": {"content": "Hi " + body["model"]}}]})

    monkeypatch.setenv("MMEL_LLM_API_KEY", "k-123")
    http = httpx.Client(transport=httpx.MockTransport(handler))
    client = ChatCompletionClient("https://llm.test/v1/", "m1", http=http, retry=RetryPolicy(max_retries=1),
                                  sleep=lambda s: None)
    assert client.chat([{"role": "user", "content": "x"}]) == "Hi m1"
    assert str(seen[0].url) == "https://llm.test/v1/chat/completions"
    assert seen[0].headers["authorization"] == "Bearer k-123"
    with pytest.raises(TransportError):
        client.chat([{"role": "user", "content": "boom"}])
    assert len(seen) == 3
    with pytest.raises(ClientError):
        client.chat([{"role": "user", "content": "odd"}])


def test_retry_gives_up_and_transport_error_is_not_not_found():
    attempts = []

    def fail():
        attempts.append(1)
        raise TransportError("down")

    with pytest.raises(TransportError):
        call_with_retries(fail, RetryPolicy(max_retries=2, backoff_base=1, backoff_max=1.5), sleep=lambda s: None)
    assert len(attempts) == 3
    assert RetryPolicy(backoff_base=1, backoff_max=1.5).delay(3) == 1.5


def test_rate_limiter_spacing():
    now = [10.0]
    slept = []

    def sleep(s):
        slept.append(s)
        now[0] += s

    limiter = RateLimiter(0.5, clock=lambda: now[0], sleep=sleep)
    limiter.wait()
    limiter.wait()
    now[0] += 1.0
    limiter.wait()
    assert slept == [0.5]
