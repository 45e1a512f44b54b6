"""Scenario-driven stand-in for the on-device agent.

A scenario file looks like::

    {"device_id": "9774d56d682e549c",
     "installs": [{"package_name": "com.facebook.katana", "granted": [...], "at": "2026-10-01T09:00:00Z"}]}

Replay publishes one ``install_event`` per install on the device topic,
then :func:`await_warnings` collects the replies.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

from .bus import ERROR_REPORT, INSTALL_EVENT, WARNING_REPORT, MessageEnvelope, topic_name
from .exceptions import BrokerClosed, GrantcheckError
from .models import RuntimeBehavior, WarningReport, format_ts, parse_ts
from .validation import check_device_id, check_package_name

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Install:
    package_name: str
    granted: frozenset
    at: object  # datetime

    def to_dict(self):
        return {"package_name": self.package_name, "granted": sorted(self.granted), "at": format_ts(self.at)}


@dataclass(frozen=True)
class InstallScenario:
    device_id: str
    installs: tuple = ()

    def __post_init__(self):
        check_device_id(self.device_id)
        for inst in self.installs:
            check_package_name(inst.package_name)
        for a, b in zip(self.installs, self.installs[1:]):
            if b.at < a.at:
                raise ValueError(f"install of {b.package_name} is earlier than the one before it")

    @property
    def topic(self):
        return topic_name(self.device_id)

    @classmethod
    def from_dict(cls, d):
        installs = tuple(Install(i["package_name"], frozenset(i.get("granted", ())), parse_ts(i["at"]))
                         for i in d.get("installs", ()))
        return cls(d["device_id"], installs)

    def to_dict(self):
        return {"device_id": self.device_id, "installs": [i.to_dict() for i in self.installs]}


def load_scenario(path) -> InstallScenario:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise GrantcheckError(f"missing scenario file: {path}") from None
    except json.JSONDecodeError as exc:
        raise GrantcheckError(f"{path}: malformed JSON at line {exc.lineno}: {exc.msg}") from None
    try:
        return InstallScenario.from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise GrantcheckError(f"{path}: invalid scenario: {exc}") from None


@dataclass
class EmissionLog:
    device_id: str
    entries: list = field(default_factory=list)
    aborted: bool = False

    @property
    def msg_ids(self):
        return [e["msg_id"] for e in self.entries]

    def to_jsonl(self):
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.entries)


def _publish_with_retry(bus, topic, env, retries, backoff):
    for attempt in range(retries + 1):
        try:
            return bus.publish(topic, env)
        except (BrokerClosed, OSError) as exc:
            if attempt == retries:
                raise
            log.warning("publish of %s failed (%s), retrying", env.msg_id, exc)
            time.sleep(backoff * (2 ** attempt))


def run_scenario(scenario: InstallScenario, bus, realtime=False, retries=3, backoff=0.05) -> EmissionLog:
    """Publish every install as an install_event, in order.

    With ``realtime`` the gaps between install timestamps are slept out.
    A publish that keeps failing after ``retries`` aborts the replay and
    the partial log is returned with ``aborted`` set.
    """
    topic = scenario.topic
    out = EmissionLog(scenario.device_id)
    try:
        bus.create_topic(topic)
    except BrokerClosed:
        out.aborted = True
        return out
    prev = None
    for inst in scenario.installs:
        if realtime and prev is not None:
            time.sleep(max(0.0, (inst.at - prev).total_seconds()))
        prev = inst.at
        payload = RuntimeBehavior(inst.package_name, inst.granted).to_dict()
        payload["at"] = format_ts(inst.at)
        env = MessageEnvelope.make(topic, INSTALL_EVENT, payload)
        try:
            _publish_with_retry(bus, topic, env, retries, backoff)
        except (BrokerClosed, OSError):
            log.error("giving up on %s after %d retries", inst.package_name, retries)
            out.aborted = True
            break
        out.entries.append({"msg_id": env.msg_id, "topic": topic, "package_name": inst.package_name,
                            "sent_at": env.sent_at})
    return out


class WarningList(list):
    """Received warnings; ``timed_out`` marks a partial result."""

    timed_out = False
    errors: list
    envelopes: list

    def to_jsonl(self):
        return "".join(json.dumps(e.to_dict(), sort_keys=True) + "\n" for e in self.envelopes)


def await_warnings(device_id, expected_count, timeout, bus, consumer_id=None) -> WarningList:
    """Collect ``expected_count`` replies (warnings or error reports) for a device.

    Replies are deduplicated on ``msg_id``.
    """
    if expected_count < 0:
        raise ValueError("expected_count must be >= 0")
    out = WarningList()
    out.errors = []
    out.envelopes = []
    if expected_count == 0:
        return out
    deadline = time.monotonic() + timeout
    seen = set()
    with bus.subscribe(topic_name(device_id), (WARNING_REPORT, ERROR_REPORT), consumer_id) as sub:
        while len(out) + len(out.errors) < expected_count:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                out.timed_out = True
                break
            env = sub.poll(timeout=remaining)
            if env is None:
                out.timed_out = True
                break
            sub.ack(env)
            if env.msg_id in seen:
                continue
            seen.add(env.msg_id)
            out.envelopes.append(env)
            if env.msg_type == WARNING_REPORT:
                out.append(WarningReport.from_dict(env.payload))
            else:
                out.errors.append(env.payload)
    return out
