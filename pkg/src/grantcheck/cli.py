"""Command-line entry point: ``grantcheck <command> [options]``.

Exit status is 0 on success, 1 for usage errors and 2 for data errors
(bad KB, missing fixture, empty corpus, unanswered installs, ...).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from importlib import resources
from pathlib import Path

from . import logs
from .agent_sim import await_warnings, load_scenario, run_scenario
from .analysis import AnalysisOptions, HttpGenerationClient
from .bus import INSTALL_EVENT, InProcessBroker, MessageEnvelope, device_of, topic_name
from .declared import DeclaredSource, default_fixture_dir, load_declared
from .exceptions import GrantcheckError
from .knowledge_base import build_kb, load_kb, validate_kb
from .models import EXCESSIVE, UNCONSENTED, UNDECLARED, RuntimeBehavior
from .retrieval import build_index
from .server import AnalysisService, Server, analyze_corpus, find_scenarios
from .store import open_store

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    def __init__(self, message, reported=False):
        super().__init__(message)
        self.reported = reported


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise UsageError(message, reported=True)


def _bundled(*parts):
    return Path(str(resources.files("grantcheck").joinpath("data", *parts)))


def _common():
    p = _Parser(add_help=False)
    g = p.add_argument_group("common options")
    g.add_argument("--kb", help="KB source directory or bundle file (default: bundled)")
    g.add_argument("--fixtures", help="declared-behavior fixture directory (default: bundled)")
    g.add_argument("--store", help="store directory; omitted means an in-memory store")
    g.add_argument("--out", help="write the command's output to this file")
    g.add_argument("--analyst", choices=("rules", "external"), default="rules")
    g.add_argument("--no-retrieval", action="store_true", help="send the bare prompt without retrieved context")
    g.add_argument("--endpoint", help="text-generation endpoint URL for --analyst external")
    g.add_argument("--model", default="llama3")
    g.add_argument("--fallback", action="store_true", help="fall back to the rules analyst if the endpoint fails")
    g.add_argument("--realtime", action="store_true", help="honour scenario timestamps when replaying")
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--log-level", default="WARNING")
    return p


def build_parser():
    common = _common()
    parser = _Parser(prog="grantcheck", description="Compare granted Android permissions with Data Safety "
                                                    "declarations.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("build-kb", parents=[common], help="validate sources and write a KB bundle")
    p.add_argument("--snapshot-version")
    sub.add_parser("validate-kb", parents=[common], help="check KB invariants")

    p = sub.add_parser("ingest", parents=[common], help="print the declared behavior of a package")
    p.add_argument("--package", required=True)

    p = sub.add_parser("analyze", parents=[common], help="analyze one package")
    p.add_argument("--package", required=True)
    p.add_argument("--granted", help="comma-separated granted permissions")
    p.add_argument("--scenario", help="scenario file to take the grant set from")
    p.add_argument("--json", action="store_true", help="print the AnalysisResult as JSON")

    p = sub.add_parser("simulate", parents=[common], help="replay a scenario through the serve loop")
    p.add_argument("--scenario", required=True)
    p.add_argument("--timeout", type=float, default=30.0)

    p = sub.add_parser("serve", parents=[common], help="answer install events read as JSON lines")
    p.add_argument("--input", help="JSONL file of install events (default: stdin)")
    p.add_argument("--timeout", type=float, default=30.0)

    p = sub.add_parser("stats", parents=[common], help="corpus statistics")
    p.add_argument("dir", nargs="?", help="fixture directory (default: bundled synthetic corpus)")
    p.add_argument("--scenarios", help="scenario file or directory (default: scenarios in DIR)")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("evict", parents=[common], help="drop cached analyses by package or KB version")
    p.add_argument("target", nargs="?")
    p.add_argument("--evict", dest="evict_target", metavar="TARGET")
    return parser


# ------------------------------------------------------------------ helpers

def _emit(args, text):
    if args.out:
        Path(args.out).write_text(text if text.endswith("\n") else text + "\n", encoding="utf-8")
    else:
        print(text)


def _options(args):
    client = None
    if args.analyst == "external":
        if not args.endpoint:
            raise UsageError("--analyst external needs --endpoint")
        client = HttpGenerationClient(args.endpoint, args.model)
    return AnalysisOptions(analyst=args.analyst, use_retrieval=not args.no_retrieval,
                           fallback_to_rules=args.fallback, client=client)


def _kb_and_index(args, need_index=None):
    kb = load_kb(args.kb)
    violations = validate_kb(kb)
    if violations:
        raise GrantcheckError("invalid KB: " + "; ".join(violations))
    if need_index is None:
        need_index = args.analyst == "external" and not args.no_retrieval
    return kb, build_index(kb) if need_index else None


def _fixture_dir(args):
    return Path(args.fixtures) if args.fixtures else default_fixture_dir()


def _granted_for(args):
    if args.granted is not None:
        return [g.strip() for g in args.granted.split(",") if g.strip()]
    files = [Path(args.scenario)] if args.scenario else sorted(_bundled("scenarios").glob("*.json"))
    for f in files:
        for inst in load_scenario(f).installs:
            if inst.package_name == args.package:
                return inst.granted
    raise GrantcheckError(f"no grant set for {args.package}: pass --granted or --scenario")


def format_report(result, runtime, declared, kb, warning):
    """Permission/category table followed by the case findings and the warning."""
    lines = [f"Package:     {result.package_name}",
             f"Store category: {result.app_category}",
             f"KB snapshot: {result.kb_snapshot_version}",
             ""]
    width = max([len(p) for p in runtime.granted] + [len("Permission")]) + 2
    lines.append(f"{'Permission':<{width}}{'Data Safety category':<28}Declared")
    matched = set(result.matched)
    for perm in sorted(runtime.granted):
        cats = sorted(kb.categories_for(perm)) if perm in kb.permissions else []
        if not cats:
            lines.append(f"{perm:<{width}}{'(not sensitive)':<28}-")
        for cat in cats:
            mark = "yes" if (perm, cat) in matched else "no"
            lines.append(f"{perm:<{width}}{cat:<28}{mark}")
    granted_cats = {c for _, c in matched}
    for cat in sorted(declared.declared_categories - granted_cats):
        lines.append(f"{'(no permission)':<{width}}{cat:<28}yes")
    lines.append("")
    for f in result.findings_of(UNDECLARED):
        lines.append(f"Case 1: {', '.join(sorted(f.permissions))} -> {', '.join(sorted(f.categories))} "
                     "(granted, not declared)")
    for f in result.findings_of(UNCONSENTED):
        lines.append(f"Case 2: {', '.join(sorted(f.categories))} (declared, no granted permission)")
    for f in result.findings_of(EXCESSIVE):
        lines.append(f"Excessive: {', '.join(sorted(f.categories))}")
    lines.append(f"Verdict: {result.verdict}")
    if result.diagnostics:
        lines.append(f"Diagnostics: {', '.join(result.diagnostics)}")
    lines.append("")
    lines.append("Warning:")
    lines += [f"  {s}" for s in warning.sentences]
    return "\n".join(lines)


# ----------------------------------------------------------------- commands

def cmd_build_kb(args):
    kb = build_kb(args.kb, snapshot_version=args.snapshot_version) if args.kb else load_kb(None)
    violations = validate_kb(kb)
    if violations:
        for v in violations:
            print(v, file=sys.stderr)
        return EXIT_DATA
    _emit(args, json.dumps(kb.to_bundle(), indent=2, sort_keys=True, ensure_ascii=False))
    if args.out:
        print(f"wrote {len(kb.permissions)} permissions, {len(kb.categories)} categories "
              f"({kb.snapshot_version}) to {args.out}", file=sys.stderr)
    return EXIT_OK


def cmd_validate_kb(args):
    kb = load_kb(args.kb)
    violations = validate_kb(kb)
    for v in violations:
        print(v, file=sys.stderr)
    if violations:
        return EXIT_DATA
    _emit(args, f"ok: {len(kb.permissions)} permissions, {len(kb.categories)} categories, "
                f"snapshot {kb.snapshot_version}")
    return EXIT_OK


def cmd_ingest(args):
    declared = load_declared(args.package, _fixture_dir(args))
    doc = {"package_name": args.package, **declared.to_dict()}
    _emit(args, json.dumps(doc, indent=2, ensure_ascii=False))
    return EXIT_OK


def cmd_analyze(args):
    options = _options(args)
    kb, index = _kb_and_index(args)
    runtime = RuntimeBehavior(args.package, _granted_for(args))
    store = open_store(args.store)
    try:
        service = AnalysisService(kb, index, store, DeclaredSource(_fixture_dir(args)), options)
        entry, _ = service.handle(runtime)
    finally:
        store.close()
    if args.json:
        _emit(args, json.dumps(entry.result.to_dict(), indent=2, ensure_ascii=False))
    else:
        _emit(args, format_report(entry.result, entry.runtime, entry.declared, kb, entry.warning))
    return EXIT_OK


def _run_server(args, kb, index, store):
    service = AnalysisService(kb, index, store, DeclaredSource(_fixture_dir(args)), _options(args))
    bus = InProcessBroker()
    return bus, Server(bus, service).start()


def cmd_simulate(args):
    scenario = load_scenario(args.scenario)
    kb, index = _kb_and_index(args)
    store = open_store(args.store)
    bus, server = _run_server(args, kb, index, store)
    try:
        store.register_device(scenario.device_id)
        emitted = run_scenario(scenario, bus, realtime=args.realtime)
        replies = await_warnings(scenario.device_id, len(emitted.entries), args.timeout, bus)
    finally:
        server.stop()
        bus.close()
        store.close()
    _emit(args, replies.to_jsonl().rstrip("\n"))
    print(f"{len(replies)} warnings, {len(replies.errors)} errors for {len(emitted.entries)} installs",
          file=sys.stderr)
    if replies.timed_out or emitted.aborted:
        return EXIT_DATA
    return EXIT_OK


def _read_events(lines):
    """Install events from JSON lines: full envelopes or ``{device_id, package_name, granted}``."""
    events = []
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
            if "msg_type" in doc:
                env = MessageEnvelope.from_wire(doc)
            else:
                payload = RuntimeBehavior(doc["package_name"], doc.get("granted", ())).to_dict()
                env = MessageEnvelope.make(topic_name(doc["device_id"]), INSTALL_EVENT, payload,
                                           msg_id=doc.get("msg_id"))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise GrantcheckError(f"input line {n}: {exc}") from None
        events.append(env)
    return events


def cmd_serve(args):
    if args.input:
        with open(args.input, encoding="utf-8") as fh:
            events = _read_events(fh)
    else:
        events = _read_events(sys.stdin)
    kb, index = _kb_and_index(args)
    store = open_store(args.store)
    bus, server = _run_server(args, kb, index, store)
    wanted = {e.msg_id for e in events}
    try:
        for env in events:
            store.register_device(device_of(env.topic))
            bus.publish(env.topic, env)
        deadline = time.monotonic() + args.timeout
        while time.monotonic() < deadline:
            answered = {r.payload.get("in_reply_to") for t in bus.topics() for r in bus.backlog(t)
                        if r.msg_type != INSTALL_EVENT}
            if wanted <= answered:
                break
            time.sleep(0.01)
    finally:
        server.stop()
        bus.close()
        store.close()
    replies = [r for t in bus.topics() for r in bus.backlog(t) if r.msg_type != INSTALL_EVENT]
    by_req = {r.payload.get("in_reply_to"): r for r in replies}
    out = [by_req[e.msg_id].to_wire() for e in events if e.msg_id in by_req]
    _emit(args, "\n".join(out))
    return EXIT_OK if len(out) == len({e.msg_id for e in events}) else EXIT_DATA


def cmd_stats(args):
    fixture_dir = Path(args.dir) if args.dir else (_fixture_dir(args))
    if args.scenarios:
        scenarios = find_scenarios(args.scenarios)
    elif args.dir:
        scenarios = find_scenarios(fixture_dir)
    else:
        scenarios = [_bundled("scenarios", "synthetic_corpus.json")]
    kb, index = _kb_and_index(args)
    report = analyze_corpus(fixture_dir, scenarios, kb, _options(args), workers=args.workers, index=index)
    stats = report.stats
    if args.json:
        _emit(args, json.dumps(stats.to_dict(), indent=2, sort_keys=True))
    else:
        _emit(args, stats.table())
    return EXIT_OK


def cmd_evict(args):
    target = args.evict_target or args.target
    if not target:
        raise UsageError("evict needs a package name or KB snapshot version")
    if not args.store:
        raise UsageError("evict needs --store")
    store = open_store(args.store)
    try:
        n = store.evict(target)
    finally:
        store.close()
    _emit(args, f"evicted {n} entries matching {target}")
    return EXIT_OK


COMMANDS = {
    "build-kb": cmd_build_kb,
    "validate-kb": cmd_validate_kb,
    "ingest": cmd_ingest,
    "analyze": cmd_analyze,
    "simulate": cmd_simulate,
    "serve": cmd_serve,
    "stats": cmd_stats,
    "evict": cmd_evict,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.workers < 1:
            parser.error("--workers must be >= 1")
        logs.configure(args.log_level.upper())
        return COMMANDS[args.command](args)
    except UsageError as exc:
        if not exc.reported:
            print(f"grantcheck: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return exc.code if isinstance(exc.code, int) else EXIT_OK
    except (GrantcheckError, OSError, ValueError) as exc:
        print(f"grantcheck: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
