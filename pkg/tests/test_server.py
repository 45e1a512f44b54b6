import json
import threading
import time
from decimal import Decimal

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grantcheck.agent_sim import await_warnings, load_scenario, run_scenario
from grantcheck.analysis import AnalysisOptions
from grantcheck.bus import ERROR_REPORT, INSTALL_EVENT, WARNING_REPORT, InProcessBroker, MessageEnvelope, topic_name
from grantcheck.declared import DeclaredSource
from grantcheck.exceptions import EmptyCorpusError
from grantcheck.models import RuntimeBehavior
from grantcheck.server import (
    AnalysisService,
    CorpusStats,
    Server,
    analyze_corpus,
    generate_corpus,
    percent,
    serve,
    write_corpus,
)
from grantcheck.store import MemoryStore

from oracle import DATA

SCENARIOS = DATA / "scenarios"


def run_server(kb, store=None, fixture_dir=None):
    bus = InProcessBroker()
    return bus, serve(bus, kb, None, store or MemoryStore(), fixture_dir=fixture_dir)


def test_serve_three_installs(kb):
    bus, server = run_server(kb)
    sc = load_scenario(SCENARIOS / "three_installs.json")
    try:
        run_scenario(sc, bus)
        got = await_warnings(sc.device_id, 3, 5, bus)
    finally:
        server.stop()
    assert [w.package_name for w in got] == [i.package_name for i in sc.installs]
    assert not got.timed_out and server.replies == 3


def test_second_identical_event_hits_cache(kb):
    store = MemoryStore()
    bus, server = run_server(kb, store)
    t = topic_name("dev")
    payload = RuntimeBehavior("com.facebook.katana", {"CAMERA"}).to_dict()
    try:
        for _ in range(2):
            bus.publish(t, MessageEnvelope.make(t, INSTALL_EVENT, payload))
        replies = await_warnings("dev", 2, 5, bus)
    finally:
        server.stop()
    assert [e.payload["cache_hit"] for e in replies.envelopes] == [False, True]
    assert server.service.computed == 1 and store.hits == 1


def test_missing_fixture_flags_unavailable(kb, tmp_path):
    bus, server = run_server(kb, fixture_dir=tmp_path)
    t = topic_name("dev")
    try:
        bus.publish(t, MessageEnvelope.make(t, INSTALL_EVENT, {"package_name": "com.no.fixture", "granted": []}))
        got = await_warnings("dev", 1, 5, bus)
    finally:
        server.stop()
    assert "declaration-unavailable" in got[0].diagnostics


def test_failure_becomes_error_report(kb):
    bus = InProcessBroker()
    service = AnalysisService(kb)

    def explode(runtime):
        raise RuntimeError("boom")
    service._compute = explode
    server = Server(bus, service).start()
    t = topic_name("dev")
    try:
        bus.publish(t, MessageEnvelope.make(t, INSTALL_EVENT, {"package_name": "com.a.b", "granted": []}))
        bus.publish(t, MessageEnvelope.make(t, INSTALL_EVENT, {"package_name": "com.a.c", "granted": []}))
        got = await_warnings("dev", 2, 5, bus)
    finally:
        server.stop()
    assert len(got.errors) == 2 and "boom" in got.errors[0]["error"]
    assert server.errors == 2


def test_topics_created_after_start_are_served(kb):
    bus, server = run_server(kb)
    try:
        for dev in ("late1", "late2"):
            t = topic_name(dev)
            bus.publish(t, MessageEnvelope.make(t, INSTALL_EVENT, {"package_name": "com.a.b", "granted": []}))
        for dev in ("late1", "late2"):
            assert len(await_warnings(dev, 1, 5, bus)) == 1
    finally:
        server.stop()


def test_redelivered_install_answered_once(kb):
    bus = InProcessBroker()
    t = topic_name("dev")
    env = MessageEnvelope.make(t, INSTALL_EVENT, {"package_name": "com.a.b", "granted": []})
    bus.publish(t, env)
    server = Server(bus, AnalysisService(kb)).start()
    for _ in range(100):
        if server.replies:
            break
        time.sleep(0.01)
    server._handle(bus.subscribe(t, INSTALL_EVENT), env)  # forced redelivery
    server.stop()
    warnings = [e for e in bus.backlog(t) if e.msg_type == WARNING_REPORT]
    assert len(warnings) == 1 and warnings[0].msg_id == "reply-" + env.msg_id


def test_per_topic_order_under_concurrency(kb):
    bus, server = run_server(kb)
    devices = [f"d{i}" for i in range(6)]
    pkgs = [f"com.order.app{i}" for i in range(8)]

    def emit(dev):
        t = topic_name(dev)
        for p in pkgs:
            bus.publish(t, MessageEnvelope.make(t, INSTALL_EVENT, {"package_name": p, "granted": ["CAMERA"]}))

    threads = [threading.Thread(target=emit, args=(d,)) for d in devices]
    try:
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        for d in devices:
            assert [w.package_name for w in await_warnings(d, len(pkgs), 10, bus)] == pkgs
    finally:
        server.stop()


# ---- corpus statistics ----

def test_percent_half_up():
    assert percent(751, 1971) == "38.10"
    assert percent(376, 2347) == "16.02"
    assert percent(1, 8) == "12.50"
    assert percent(1, 200) == "0.50"
    assert percent(0, 0) == "0.00"
    assert percent(1, 800) == "0.13"  # 0.125 exactly: half-up, not half-even
    assert Decimal(percent(3, 800)) == Decimal("0.38")


def test_stats_single_consistent_app(kb, tmp_path):
    fdir = tmp_path / "f"
    fdir.mkdir()
    (fdir / "com.one.app.json").write_text(json.dumps(
        {"package_name": "com.one.app", "data_safety": ["Calendar"], "app_category": "Productivity"}))
    sc = tmp_path / "s.json"
    sc.write_text(json.dumps({"device_id": "d", "installs": [
        {"package_name": "com.one.app", "granted": ["READ_CALENDAR"], "at": "2026-01-01T00:00:00Z"}]}))
    s = analyze_corpus(fdir, [sc], kb).stats
    assert (s.total, s.consistent, s.case1, s.case2, s.case3) == (1, 1, 0, 0, 0)


def test_empty_corpus(kb, tmp_path):
    with pytest.raises(EmptyCorpusError, match="no apps to analyze"):
        analyze_corpus(tmp_path, [], kb)


def test_stats_outputs(kb):
    report = analyze_corpus(None, [SCENARIOS / "synthetic_corpus.json"], kb)
    s = report.stats
    d = s.to_dict()
    assert d["percent"]["consistent"] == "20.00"
    assert all(0.0 <= r <= 1.0 for r in s.per_app_category.values())
    assert abs(sum(s.omitted_categories.values()) - 1.0) < 1e-12
    table = s.table()
    assert "Case1" in table and "Total" in table


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 60), st.integers(0, 10_000))
def test_partition_on_generated_corpora(kb, tmp_path_factory, n, seed):
    d = tmp_path_factory.mktemp("corpus")
    fdir, sc = write_corpus(generate_corpus(n, kb, seed), d)
    s = analyze_corpus(fdir, [sc], kb).stats
    assert s.check_partition() and s.total == n


def test_adversarial_fixtures_partition(kb, tmp_path):
    corpus = generate_corpus(20, kb, seed=1)
    for fixture, _ in corpus[:5]:
        fixture["app_category"] = "Astrology"
    for fixture, _ in corpus[5:8]:
        fixture["data_safety"] = []
    fdir, sc = write_corpus(corpus, tmp_path)
    (fdir / f"{corpus[9][0]['package_name']}.json").unlink()  # missing declaration
    report = analyze_corpus(fdir, [sc], kb)
    assert report.stats.check_partition() and report.stats.total == 20


def test_dedupe_by_package(kb):
    twice = [SCENARIOS / "synthetic_corpus.json"] * 2
    assert analyze_corpus(None, twice, kb).stats.total == 10


def test_corpus_stats_reference_counts():
    s = CorpusStats(total=2347, consistent=376, case1=751, case2=563, case3=657)
    assert s.check_partition()
    d = s.to_dict()["percent"]
    assert d["consistent"] == "16.02"
    assert d["case1_of_inconsistent"] == "38.10"
    assert d["case2_of_inconsistent"] == "28.56"
    assert d["case3_of_inconsistent"] == "33.33"


def test_external_options_fallback_in_corpus(kb):
    class Down:
        def generate(self, prompt, timeout=None):
            from grantcheck.exceptions import EndpointError
            raise EndpointError("down")
    opts = AnalysisOptions(analyst="external", client=Down(), fallback_to_rules=True, use_retrieval=False)
    r = analyze_corpus(None, [SCENARIOS / "synthetic_corpus.json"], kb, opts)
    assert all("analyst-fallback" in x.diagnostics for x in r.results)
    assert (r.stats.consistent, r.stats.case1, r.stats.case2, r.stats.case3) == (2, 3, 2, 3)


def test_service_declared_source(kb):
    svc = AnalysisService(kb, declared_source=DeclaredSource())
    env = MessageEnvelope.make(topic_name("x"), INSTALL_EVENT, {"package_name": "com.facebook.katana",
                                                                 "granted": ["READ_CALL_LOG"]})
    reply = svc.reply_to(env)
    assert reply.msg_type == WARNING_REPORT and reply.payload["in_reply_to"] == env.msg_id
    bad = MessageEnvelope("m1", topic_name("x"), INSTALL_EVENT, {"package_name": "nodots"}, "t")
    assert svc.reply_to(bad).msg_type == ERROR_REPORT
