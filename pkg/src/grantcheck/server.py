"""Server side: the per-device serve loop and batch corpus analysis."""

from __future__ import annotations

import json
import logging
import random
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

from .agent_sim import InstallScenario, load_scenario
from .analysis import AnalysisOptions, AnalysisRequest, analyze
from .bus import ERROR_REPORT, INSTALL_EVENT, WARNING_REPORT, MessageEnvelope
from .declared import DeclaredSource
from .exceptions import EmptyCorpusError
from .knowledge_base import CANONICAL_CATEGORIES
from .models import UNDECLARED, VERDICTS, RuntimeBehavior
from .store import MemoryStore
from .summarizer import summarize

log = logging.getLogger(__name__)

SERVER_CONSUMER = "analysis-server"


class AnalysisService:
    """ingest -> cache lookup -> retrieval/analysis -> summary, for one install."""

    def __init__(self, kb, index=None, store=None, declared_source=None, options=None, summarizer=None):
        self.kb = kb
        self.index = index
        self.store = store if store is not None else MemoryStore()
        self.declared_source = declared_source or DeclaredSource()
        self.options = options or AnalysisOptions()
        self.summarizer = summarizer
        self.computed = 0
        self._count_lock = threading.Lock()

    def _compute(self, runtime):
        declared, diags = self.declared_source.fetch(runtime.package_name)
        result = analyze(AnalysisRequest(runtime, declared, diags), self.kb, self.index, self.options)
        warning = self.summarizer.summarize(result) if self.summarizer else summarize(result)
        with self._count_lock:
            self.computed += 1
        return declared, result, warning

    def handle(self, runtime: RuntimeBehavior):
        """Return ``(CachedAnalysis, cache_hit)``."""
        return self.store.get_or_insert(runtime.package_name, runtime, lambda: self._compute(runtime),
                                        self.kb.snapshot_version)

    def reply_to(self, env: MessageEnvelope) -> MessageEnvelope:
        """Build the warning (or error report) answering one install event."""
        reply_id = "reply-" + env.msg_id
        try:
            runtime = RuntimeBehavior.from_dict(env.payload)
            entry, hit = self.handle(runtime)
            payload = entry.warning.to_dict()
            payload["in_reply_to"] = env.msg_id
            payload["cache_hit"] = hit
            return MessageEnvelope.make(env.topic, WARNING_REPORT, payload, msg_id=reply_id)
        except Exception as exc:
            log.exception("analysis failed", extra={"msg_id": env.msg_id, "component": "server"})
            payload = {"error": f"{type(exc).__name__}: {exc}", "in_reply_to": env.msg_id,
                       "package_name": env.payload.get("package_name")}
            return MessageEnvelope.make(env.topic, ERROR_REPORT, payload, msg_id=reply_id)


class Server:
    """Subscribes to every device topic and answers install events.

    One worker thread per topic keeps per-device order; topics are served
    concurrently.
    """

    def __init__(self, bus, service: AnalysisService, consumer_id=SERVER_CONSUMER, poll_interval=0.05):
        self.bus = bus
        self.service = service
        self.consumer_id = consumer_id
        self.poll_interval = poll_interval
        self._stop = threading.Event()
        self._threads: dict[str, threading.Thread] = {}
        self._lock = threading.Lock()
        self._processed: set[str] = set()
        self.replies = 0
        self.errors = 0
        self.cache_hits = 0

    def start(self):
        self.bus.add_topic_listener(self._watch)
        for topic in self.bus.topics():
            self._watch(topic)
        return self

    def _watch(self, topic):
        with self._lock:
            if topic in self._threads or self._stop.is_set():
                return
            t = threading.Thread(target=self._run_topic, args=(topic,), name=f"serve-{topic}", daemon=True)
            self._threads[topic] = t
        t.start()

    def _run_topic(self, topic):
        sub = self.bus.subscribe(topic, INSTALL_EVENT, self.consumer_id)
        try:
            while True:
                env = sub.poll(timeout=self.poll_interval)
                if env is None:
                    if self._stop.is_set() or self.bus.closed:
                        return
                    continue
                self._handle(sub, env)
        finally:
            sub.close()

    def _handle(self, sub, env):
        with self._lock:
            seen = env.msg_id in self._processed
        if not seen:
            reply = self.service.reply_to(env)
            self.bus.publish(env.topic, reply)
            with self._lock:
                self._processed.add(env.msg_id)
                self.replies += 1
                if reply.msg_type == ERROR_REPORT:
                    self.errors += 1
                elif reply.payload.get("cache_hit"):
                    self.cache_hits += 1
            log.info("answered install event", extra={"msg_id": env.msg_id, "component": "server"})
        sub.ack(env)

    def stop(self, timeout=5.0):
        """Drain pending events, then stop the workers."""
        self._stop.set()
        with self._lock:
            threads = list(self._threads.values())
        for t in threads:
            t.join(timeout)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def serve(bus, kb, index=None, store=None, options=None, fixture_dir=None) -> Server:
    service = AnalysisService(kb, index, store, DeclaredSource(fixture_dir), options)
    return Server(bus, service).start()


# ----------------------------------------------------------------- statistics

def percent(count, total):
    """Percentage with two decimals, rounded half-up, as a string."""
    if total == 0:
        return "0.00"
    value = (Decimal(count) * 100 / Decimal(total)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)
    return f"{value:.2f}"


@dataclass
class CorpusStats:
    total: int = 0
    consistent: int = 0
    case1: int = 0
    case2: int = 0
    case3: int = 0
    per_app_category: dict = field(default_factory=dict)
    omitted_categories: dict = field(default_factory=dict)
    omitted_counts: dict = field(default_factory=dict)
    app_category_counts: dict = field(default_factory=dict)  # category -> (inconsistent, total)

    @classmethod
    def from_results(cls, results):
        counts = Counter(r.verdict for r in results)
        by_cat, bad_cat = Counter(), Counter()
        omitted = Counter()
        for r in results:
            by_cat[r.app_category] += 1
            if r.verdict != "Consistent":
                bad_cat[r.app_category] += 1
            for f in r.findings_of(UNDECLARED):
                omitted.update(f.categories)
        n_omitted = sum(omitted.values())
        return cls(
            total=len(results),
            consistent=counts["Consistent"],
            case1=counts["Case1"],
            case2=counts["Case2"],
            case3=counts["Case3"],
            per_app_category={c: bad_cat[c] / by_cat[c] for c in sorted(by_cat)},
            omitted_categories={c: omitted[c] / n_omitted for c in sorted(omitted)},
            omitted_counts=dict(sorted(omitted.items())),
            app_category_counts={c: (bad_cat[c], by_cat[c]) for c in sorted(by_cat)},
        )

    @property
    def inconsistent(self):
        return self.case1 + self.case2 + self.case3

    def check_partition(self):
        return self.consistent + self.case1 + self.case2 + self.case3 == self.total

    def to_dict(self):
        return {
            "total": self.total,
            "consistent": self.consistent,
            "case1": self.case1,
            "case2": self.case2,
            "case3": self.case3,
            "percent": {
                "consistent": percent(self.consistent, self.total),
                "inconsistent": percent(self.inconsistent, self.total),
                "case1_of_inconsistent": percent(self.case1, self.inconsistent),
                "case2_of_inconsistent": percent(self.case2, self.inconsistent),
                "case3_of_inconsistent": percent(self.case3, self.inconsistent),
            },
            "per_app_category": self.per_app_category,
            "omitted_categories": self.omitted_categories,
            "omitted_counts": self.omitted_counts,
            "app_category_counts": {c: list(v) for c, v in self.app_category_counts.items()},
        }

    def table(self):
        rows = [
            ("Consistent", self.consistent, percent(self.consistent, self.total) + "% of total"),
            ("Case1", self.case1, percent(self.case1, self.inconsistent) + "% of inconsistent"),
            ("Case2", self.case2, percent(self.case2, self.inconsistent) + "% of inconsistent"),
            ("Case3", self.case3, percent(self.case3, self.inconsistent) + "% of inconsistent"),
            ("Total", self.total, ""),
        ]
        lines = [f"{'verdict':<12}{'count':>8}  share"]
        lines += [f"{name:<12}{n:>8}  {share}" for name, n, share in rows]
        if self.per_app_category:
            lines.append("")
            lines.append(f"{'app category':<20}{'inconsistency rate':>20}")
            for cat, (bad, n) in self.app_category_counts.items():
                lines.append(f"{cat:<20}{percent(bad, n) + '%':>20}{bad:>6}/{n}")
        if self.omitted_counts:
            lines.append("")
            lines.append(f"{'undeclared category':<20}{'count':>8}{'share':>10}")
            for cat, n in sorted(self.omitted_counts.items(), key=lambda kv: (-kv[1], kv[0])):
                lines.append(f"{cat:<20}{n:>8}{percent(n, sum(self.omitted_counts.values())) + '%':>10}")
        return "\n".join(ln.rstrip() for ln in lines)


@dataclass
class CorpusReport:
    results: list
    stats: CorpusStats


def corpus_installs(scenarios):
    """Flatten scenarios into ``RuntimeBehavior``s, first install per package wins."""
    seen, out = set(), []
    for sc in scenarios:
        if not isinstance(sc, InstallScenario):
            sc = load_scenario(sc)
        for inst in sc.installs:
            if inst.package_name not in seen:
                seen.add(inst.package_name)
                out.append(RuntimeBehavior(inst.package_name, inst.granted))
    return out


def analyze_corpus(fixture_dir, scenarios, kb, options=None, workers=1, index=None) -> CorpusReport:
    """Analyze every installed package once; results keep scenario order."""
    runtimes = corpus_installs(scenarios)
    if not runtimes:
        raise EmptyCorpusError()
    source = DeclaredSource(fixture_dir)
    options = options or AnalysisOptions()

    def one(rt):
        declared, diags = source.fetch(rt.package_name)
        return analyze(AnalysisRequest(rt, declared, diags), kb, index, options)

    if workers <= 1:
        results = [one(rt) for rt in runtimes]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, runtimes))
    return CorpusReport(results, CorpusStats.from_results(results))


def find_scenarios(path):
    """Scenario files under ``path`` (files holding an ``installs`` key)."""
    path = Path(path)
    files = [path] if path.is_file() else sorted(path.glob("*.json"))
    out = []
    for f in files:
        try:
            doc = json.loads(f.read_text(encoding="utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError):
            continue
        if isinstance(doc, dict) and "installs" in doc:
            out.append(f)
    return out


# ------------------------------------------------------------ synthetic data

APP_CATEGORIES = ("Social", "Productivity", "Games", "Communication", "Shopping", "Finance", "Health & Fitness",
                  "Education", "Travel", "Entertainment")


def generate_corpus(n, kb, seed=0, max_granted=8, max_declared=5):
    """Random (fixture dict, RuntimeBehavior) pairs for load testing."""
    rng = random.Random(seed)
    perms = sorted(kb.permissions)
    out = []
    for i in range(n):
        pkg = f"com.synthetic.app{i:05d}"
        granted = rng.sample(perms, rng.randint(0, max_granted))
        declared = rng.sample(CANONICAL_CATEGORIES, rng.randint(0, max_declared))
        fixture = {"package_name": pkg, "data_safety": declared, "app_category": rng.choice(APP_CATEGORIES),
                   "description": f"Synthetic app number {i}."}
        out.append((fixture, RuntimeBehavior(pkg, granted)))
    return out


def write_corpus(corpus, directory, device_id="synthetic"):
    """Write fixtures and one scenario file; return ``(fixture_dir, scenario_path)``."""
    directory = Path(directory)
    fdir = directory / "fixtures"
    fdir.mkdir(parents=True, exist_ok=True)
    installs = []
    for fixture, rt in corpus:
        (fdir / f"{fixture['package_name']}.json").write_text(json.dumps(fixture), encoding="utf-8")
        installs.append({"package_name": rt.package_name, "granted": sorted(rt.granted),
                         "at": "2026-01-01T00:00:00Z"})
    scenario = directory / "scenario.json"
    scenario.write_text(json.dumps({"device_id": device_id, "installs": installs}), encoding="utf-8")
    return fdir, scenario


def benchmark_cache(service: AnalysisService, runtimes, repeats=3):
    """Mean seconds per install on the cold (compute) and warm (cached) paths."""
    t0 = time.perf_counter()
    for rt in runtimes:
        service.handle(rt)
    cold = (time.perf_counter() - t0) / len(runtimes)
    t0 = time.perf_counter()
    for _ in range(repeats):
        for rt in runtimes:
            service.handle(rt)
    warm = (time.perf_counter() - t0) / (len(runtimes) * repeats)
    return {"cold_s": cold, "warm_s": warm, "speedup": cold / warm if warm else float("inf")}


__all__ = ["AnalysisService", "Server", "serve", "CorpusStats", "CorpusReport", "analyze_corpus", "percent",
           "generate_corpus", "write_corpus", "benchmark_cache", "find_scenarios", "VERDICTS"]
