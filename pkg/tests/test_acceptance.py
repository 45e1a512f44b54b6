"""One test per acceptance criterion. Each prints a single PASS/FAIL line."""

import json
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor

import oracle
from grantcheck.agent_sim import await_warnings, load_scenario, run_scenario
from grantcheck.analysis import build_prompt, detect_inconsistencies
from grantcheck.bus import INSTALL_EVENT, WARNING_REPORT, InProcessBroker, MessageEnvelope, topic_name
from grantcheck.cli import main
from grantcheck.declared import DeclaredSource, load_declared
from grantcheck.knowledge_base import build_kb
from grantcheck.models import EXCESSIVE, UNCONSENTED, UNDECLARED, AnalysisResult, DeclaredBehavior, RuntimeBehavior
from grantcheck.server import (
    AnalysisService,
    CorpusStats,
    Server,
    analyze_corpus,
    benchmark_cache,
    generate_corpus,
    serve,
    write_corpus,
)
from grantcheck.store import JsonlStore, MemoryStore
from grantcheck.summarizer import MAX_SENTENCE, summarize

from stub_endpoint import CapturingEndpoint

SCENARIOS = oracle.DATA / "scenarios"
FACEBOOK = "com.facebook.katana"

FACEBOOK_MATCHED = {
    ("READ_CALENDAR", "Calendar"), ("WRITE_CALENDAR", "Calendar"),
    ("READ_CONTACTS", "Contacts"), ("WRITE_CONTACTS", "Contacts"),
    ("ACCESS_FINE_LOCATION", "Location"), ("ACCESS_COARSE_LOCATION", "Location"),
    ("RECORD_AUDIO", "Audio"), ("CAMERA", "Photos and videos"),
    ("READ_EXTERNAL_STORAGE", "Photos and videos"), ("READ_EXTERNAL_STORAGE", "Files and docs"),
    ("READ_PHONE_STATE", "Device or other IDs"), ("READ_BASIC_PHONE_STATE", "Device or other IDs"),
    ("READ_PHONE_NUMBERS", "Device or other IDs"), ("BLUETOOTH_CONNECT", "Device or other IDs"),
    ("BLUETOOTH", "Device or other IDs"), ("BLUETOOTH_ADMIN", "Device or other IDs"),
}
FACEBOOK_CASE1 = {"Call logs": {"READ_CALL_LOG", "CALL_PHONE", "ANSWER_PHONE_CALLS", "MANAGE_OWN_CALLS"}}
FACEBOOK_CASE2 = {"Web browsing", "App activity", "App info and performance", "Messages", "Personal info",
              "Financial info", "Health and fitness"}
FACEBOOK_EXCESSIVE = {"Web browsing", "Health and fitness", "Financial info"}

GOLDEN = [
    "The app can collect your call history, but the app developer does not mention it in the privacy "
    "information shown on the app store.",
    "The app states that it collects data such as your browsing activity, app usage details, app performance "
    "details, messages, personal information, financial information, and health data, even though it has not "
    "received your consent to access this information on your device.",
    "The app may over-collect because web browsing, financial, and health data may not relate to its Social "
    "features.",
]

RESULTS = {}


class criterion:
    """Records and prints PASS/FAIL for one criterion around the block."""

    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        line = f"{status} {self.name}" + ("" if exc is None else f" ({exc_type.__name__}: {exc})")
        RESULTS[self.name] = line
        print(line)
        return False


def reduce(result):
    """An AnalysisResult in the oracle's shape."""
    case1 = {}
    for f in result.findings_of(UNDECLARED):
        for c in f.categories:
            case1.setdefault(c, set()).update(f.permissions)
    return {
        "matched": set(result.matched),
        "case1": case1,
        "case2": set().union(*[f.categories for f in result.findings_of(UNCONSENTED)]),
        "excessive": set().union(*[f.categories for f in result.findings_of(EXCESSIVE)]),
        "verdict": result.verdict,
    }


def facebook_runtime():
    return RuntimeBehavior(FACEBOOK, load_scenario(SCENARIOS / "facebook.json").installs[0].granted)


def test_facebook_golden(capsys):
    with criterion("facebook-golden: Facebook verdict, matched, Case 1, Case 2, excessive"):
        start = time.perf_counter()
        code = main(["analyze", "--package", FACEBOOK, "--json"])
        elapsed = time.perf_counter() - start
        out = capsys.readouterr().out
        assert code == 0
        got = reduce(AnalysisResult.from_dict(json.loads(out)))
        assert got["verdict"] == "Case3"
        assert got["matched"] == FACEBOOK_MATCHED
        assert got["case1"] == FACEBOOK_CASE1
        assert got["case2"] == FACEBOOK_CASE2
        assert got["excessive"] == FACEBOOK_EXCESSIVE
        declared, app_category = oracle.fixture(FACEBOOK)
        assert got == oracle.classify(facebook_runtime().granted, declared, app_category)
        assert elapsed < 1.0, f"{elapsed:.3f}s"


def test_oracle_equivalence(kb):
    with criterion("oracle-equivalence: 1000 random instances agree with brute force"):
        rng = random.Random(20261014)
        perms = sorted(oracle.MAPPING)
        cats = sorted(oracle.CATEGORIES)
        apps = sorted(oracle.RELEVANCE) + ["Unknown"]
        start = time.perf_counter()
        trials = 1000
        for i in range(trials):
            granted = set(rng.sample(perms, rng.randint(0, 8)))
            declared = set(rng.sample(cats, rng.randint(0, 5)))
            app = rng.choice(apps)
            got = detect_inconsistencies(RuntimeBehavior(f"com.trial.app{i}", granted),
                                         DeclaredBehavior(frozenset(declared), "", app), kb)
            assert reduce(got) == oracle.classify(granted, declared, app), (granted, declared, app)
        elapsed = time.perf_counter() - start
        assert elapsed < 30, f"{elapsed:.1f}s"


def test_partition_invariant(kb, tmp_path):
    with criterion("partition: bundled corpus counts and generated-corpus partition"):
        report = analyze_corpus(None, [SCENARIOS / "synthetic_corpus.json"], kb)
        s = report.stats
        assert (s.total, s.consistent, s.case1, s.case2, s.case3) == (10, 2, 3, 2, 3)
        for r in report.results:
            declared, app_category = oracle.fixture(r.package_name)
            granted = next(i.granted for i in load_scenario(SCENARIOS / "synthetic_corpus.json").installs
                           if i.package_name == r.package_name)
            assert r.verdict == oracle.classify(granted, declared, app_category)["verdict"]
        for seed in range(5):
            d = tmp_path / f"c{seed}"
            fdir, sc = write_corpus(generate_corpus(40 + seed * 17, kb, seed), d)
            g = analyze_corpus(fdir, [sc], kb).stats
            assert g.consistent + g.case1 + g.case2 + g.case3 == g.total == 40 + seed * 17
        assert 376 + 751 + 563 + 657 == 2347
        assert CorpusStats(total=2347, consistent=376, case1=751, case2=563, case3=657).check_partition()


def test_retrieval_self_query(index):
    with criterion("retrieval: every entry self-retrieves at k=1 and prefix law holds"):
        hits = sum(index.retrieve(text, 1)[0][0] == eid for eid, text in zip(index.entry_ids_, index.texts_))
        assert hits == len(index), f"{hits}/{len(index)}"
        rng = random.Random(7)
        vocab = " ".join(index.texts_).split()
        for _ in range(100):
            q = " ".join(rng.sample(vocab, rng.randint(1, 6)))
            k = rng.randint(1, len(index) - 1)
            assert index.retrieve(q, k) == index.retrieve(q, k + 1)[:k]


def test_ablation_switch(kb, capsys):
    with criterion("ablation: --no-retrieval sends P exactly; retrieval on extends P with descriptions"):
        runtime = facebook_runtime()
        declared = load_declared(FACEBOOK)
        p = build_prompt(runtime, declared)
        reply = json.dumps(detect_inconsistencies(runtime, declared, kb).to_dict())
        base = ["analyze", "--package", FACEBOOK, "--analyst", "external", "--json"]
        with CapturingEndpoint(reply) as ep:
            assert main(base + ["--endpoint", ep.url, "--no-retrieval"]) == 0
            assert main(base + ["--endpoint", ep.url]) == 0
        capsys.readouterr()
        off, on = ep.prompts
        assert off == p
        assert on.startswith(p) and len(on) > len(p)
        for perm in runtime.granted & set(kb.permissions):
            assert kb.permissions[perm].description in on, perm


def test_summarizer_golden(kb):
    with criterion("summarizer: Facebook golden sentences and 280-char bound on fixture corpus"):
        runtime = facebook_runtime()
        result = detect_inconsistencies(runtime, load_declared(FACEBOOK), kb)
        assert list(summarize(result).sentences) == GOLDEN
        report = analyze_corpus(None, [SCENARIOS / "synthetic_corpus.json", SCENARIOS / "three_installs.json"], kb)
        assert MAX_SENTENCE == 280
        for r in report.results:
            for s in summarize(r).sentences:
                assert len(s) <= 280, (r.package_name, len(s))


def test_end_to_end_messaging(kb):
    with criterion("messaging: three installs give three ordered warnings, isolation, no duplicates"):
        bus = InProcessBroker()
        server = serve(bus, kb, None, MemoryStore())
        sc = load_scenario(SCENARIOS / "three_installs.json")
        try:
            run_scenario(sc, bus)
            got = await_warnings(sc.device_id, 3, 5, bus)
            foreign = await_warnings("someone-else", 1, 0.2, bus)
        finally:
            server.stop()
        assert len(got) == 3 and not got.timed_out
        assert [w.package_name for w in got] == [i.package_name for i in sc.installs]
        assert len(foreign) == 0 and foreign.errors == []
        assert all(e.topic == sc.topic for e in bus.backlog(sc.topic))

        # forced redelivery of an install the server already answered
        bus2 = InProcessBroker()
        t = topic_name("redeliver")
        env = MessageEnvelope.make(t, INSTALL_EVENT, {"package_name": "com.a.b", "granted": ["CAMERA"]})
        bus2.publish(t, env)
        server2 = Server(bus2, AnalysisService(kb)).start()
        for _ in range(200):
            if server2.replies:
                break
            time.sleep(0.01)
        server2._handle(bus2.subscribe(t, INSTALL_EVENT), env)
        server2.stop()
        replies = [e for e in bus2.backlog(t) if e.msg_type == WARNING_REPORT]
        assert len(replies) == 1


class CountingCompute:
    def __init__(self, kb, delay=0.0):
        self.kb = kb
        self.delay = delay
        self.calls = 0
        self.lock = threading.Lock()

    def __call__(self, runtime):
        def compute():
            with self.lock:
                self.calls += 1
            time.sleep(self.delay)
            declared, _ = DeclaredSource().fetch(runtime.package_name)
            result = detect_inconsistencies(runtime, declared, self.kb)
            return declared, result, summarize(result)
        return compute


def test_cache_semantics(kb, tmp_path):
    with criterion("cache: reinstall hit, key changes miss, single flight, warm path at least 5x faster"):
        store = MemoryStore()
        rt = facebook_runtime()
        c = CountingCompute(kb)
        store.get_or_insert(rt.package_name, rt, c(rt), kb.snapshot_version)
        warm = CountingCompute(kb)
        _, hit = store.get_or_insert(rt.package_name, rt, warm(rt), kb.snapshot_version)
        assert hit and warm.calls == 0
        changed = RuntimeBehavior(rt.package_name, rt.granted - {"CAMERA"})
        _, hit = store.get_or_insert(rt.package_name, changed, c(changed), kb.snapshot_version)
        assert not hit
        kb_next = build_kb(snapshot_version=kb.snapshot_version + "-next")
        c_next = CountingCompute(kb_next)
        _, hit = store.get_or_insert(rt.package_name, rt, c_next(rt), kb_next.snapshot_version)
        assert not hit and c.calls == 2 and c_next.calls == 1

        hammer = CountingCompute(kb, delay=0.05)
        fresh = MemoryStore()
        barrier = threading.Barrier(16)

        def call(_):
            barrier.wait()
            return fresh.get_or_insert(rt.package_name, rt, hammer(rt), kb.snapshot_version)
        with ThreadPoolExecutor(16) as pool:
            list(pool.map(call, range(16)))
        assert hammer.calls == 1

        persistent = JsonlStore(tmp_path / "bench", fsync=True)
        try:
            service = AnalysisService(kb, store=persistent)
            rng = random.Random(3)
            perms = sorted(kb.permissions)
            runtimes = [RuntimeBehavior(f"com.bench.app{i}", rng.sample(perms, rng.randint(1, 8)))
                        for i in range(40)]
            bench = benchmark_cache(service, runtimes)
        finally:
            persistent.close()
        assert bench["speedup"] >= 5, bench


def test_desk_scale_throughput(kb, tmp_path):
    with criterion("throughput: 2347 apps under 10 s, identical at 1 and 8 workers"):
        fdir, sc = write_corpus(generate_corpus(2347, kb, seed=11), tmp_path)
        timings = {}
        results = {}
        for workers in (1, 8):
            start = time.perf_counter()
            results[workers] = analyze_corpus(fdir, [sc], kb, workers=workers)
            timings[workers] = time.perf_counter() - start
        assert results[1].stats.total == 2347
        assert results[1].results == results[8].results
        assert results[1].stats.to_dict() == results[8].stats.to_dict()
        assert max(timings.values()) < 10, timings
        assert timings[1] / 2347 < 0.2, timings

