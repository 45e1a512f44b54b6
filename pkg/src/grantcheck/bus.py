"""Per-device publish/subscribe messaging.

:class:`InProcessBroker` keeps a bounded, append-only log per topic.
Subscribers read forward from an offset and acknowledge to advance a
committed position; a subscriber that reconnects under the same
``consumer_id`` resumes from its last commit, so unacknowledged envelopes
are delivered again (at-least-once). Publishing an envelope whose
``msg_id`` the broker has already seen is a no-op, which makes producer
retries safe.
"""

from __future__ import annotations

import json
import logging
import itertools
import threading
import time
import uuid
from collections import deque
from dataclasses import dataclass

from .exceptions import BrokerClosed, PayloadTooLarge
from .models import RuntimeBehavior, WarningReport, format_ts, utcnow
from .validation import DEVICE_ID_RE, check_device_id

log = logging.getLogger(__name__)

INSTALL_EVENT = "install_event"
WARNING_REPORT = "warning_report"
ERROR_REPORT = "error_report"
MSG_TYPES = (INSTALL_EVENT, WARNING_REPORT, ERROR_REPORT)

TOPIC_PREFIX = "device-"
MAX_PAYLOAD = 1 << 20
DEFAULT_RETENTION = 10_000


def topic_name(device_id):
    return TOPIC_PREFIX + check_device_id(device_id)


def check_topic(topic):
    if not isinstance(topic, str) or not topic.startswith(TOPIC_PREFIX) or \
            not DEVICE_ID_RE.match(topic[len(TOPIC_PREFIX):]):
        raise ValueError(f"ill-formed topic: {topic!r}")
    return topic


def device_of(topic):
    return check_topic(topic)[len(TOPIC_PREFIX):]


def validate_payload(msg_type, payload):
    """Raise ValueError unless ``payload`` deserializes to the type ``msg_type`` implies."""
    if msg_type in (INSTALL_EVENT, WARNING_REPORT):
        cls = RuntimeBehavior if msg_type == INSTALL_EVENT else WarningReport
        try:
            cls.from_dict(payload)
        except (KeyError, TypeError, AttributeError) as exc:
            raise ValueError(f"{msg_type} payload is malformed: {exc!r}") from None
    elif msg_type == ERROR_REPORT:
        if "error" not in payload:
            raise ValueError("error_report payload needs an 'error' field")
    else:
        raise ValueError(f"unknown msg_type {msg_type!r}")


@dataclass(frozen=True)
class MessageEnvelope:
    msg_id: str
    topic: str
    msg_type: str
    payload: dict
    sent_at: str

    @classmethod
    def make(cls, topic, msg_type, payload, msg_id=None):
        env = cls(msg_id or uuid.uuid4().hex, check_topic(topic), msg_type, payload, format_ts(utcnow()))
        validate_payload(msg_type, payload)
        return env

    def to_dict(self):
        return {"msg_id": self.msg_id, "topic": self.topic, "msg_type": self.msg_type,
                "payload": self.payload, "sent_at": self.sent_at}

    def to_wire(self):
        return json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_wire(cls, data):
        d = json.loads(data) if isinstance(data, (str, bytes)) else data
        env = cls(d["msg_id"], check_topic(d["topic"]), d["msg_type"], d["payload"], d["sent_at"])
        validate_payload(env.msg_type, env.payload)
        return env


@dataclass(frozen=True)
class Ack:
    topic: str
    offset: int
    msg_id: str
    duplicate: bool = False


class _TopicLog:
    __slots__ = ("entries", "next_offset")

    def __init__(self, retention):
        self.entries = deque(maxlen=retention)  # (offset, envelope)
        self.next_offset = 0

    @property
    def first_offset(self):
        return self.entries[0][0] if self.entries else self.next_offset


class InProcessBroker:
    """Thread-safe in-memory broker.

    Topics auto-create on first publish or subscribe. Ordering is per topic
    only.
    """

    def __init__(self, retention=DEFAULT_RETENTION, max_payload=MAX_PAYLOAD):
        self.retention = retention
        self.max_payload = max_payload
        self._cond = threading.Condition()
        self._topics: dict[str, _TopicLog] = {}
        self._seen: set[str] = set()
        self._committed: dict[tuple[str, str], int] = {}
        self._listeners = []
        self._closed = False

    # topics -------------------------------------------------------------
    def _ensure_topic(self, topic):
        """Create ``topic`` if needed; caller holds the lock. Returns True if created."""
        if topic in self._topics:
            return False
        self._topics[topic] = _TopicLog(self.retention)
        return True

    def _notify_created(self, topic):
        for cb in list(self._listeners):
            try:
                cb(topic)
            except Exception:
                log.exception("topic listener failed for %s", topic)

    def create_topic(self, topic):
        check_topic(topic)
        with self._cond:
            self._check_open()
            created = self._ensure_topic(topic)
        if created:
            self._notify_created(topic)
        return topic

    def topics(self):
        with self._cond:
            return sorted(self._topics)

    def add_topic_listener(self, callback):
        """Call ``callback(topic)`` for every topic created from now on."""
        with self._cond:
            self._listeners.append(callback)

    # producing ----------------------------------------------------------
    def _check_open(self):
        if self._closed:
            raise BrokerClosed("broker is closed")

    def publish(self, topic, envelope: MessageEnvelope) -> Ack:
        check_topic(topic)
        if envelope.topic != topic:
            raise ValueError(f"envelope addressed to {envelope.topic}, published on {topic}")
        if envelope.msg_type not in MSG_TYPES:
            raise ValueError(f"unknown msg_type {envelope.msg_type!r}")
        size = len(json.dumps(envelope.payload, ensure_ascii=False).encode("utf-8"))
        if size > self.max_payload:
            raise PayloadTooLarge(f"payload of {size} bytes exceeds {self.max_payload}")
        with self._cond:
            self._check_open()
            created = self._ensure_topic(topic)
            tlog = self._topics[topic]
            if envelope.msg_id in self._seen:
                ack = Ack(topic, -1, envelope.msg_id, duplicate=True)
            else:
                self._seen.add(envelope.msg_id)
                offset = tlog.next_offset
                tlog.entries.append((offset, envelope))
                tlog.next_offset += 1
                ack = Ack(topic, offset, envelope.msg_id)
                self._cond.notify_all()
        if created:
            self._notify_created(topic)
        return ack

    # consuming ----------------------------------------------------------
    def subscribe(self, topic, msg_types=None, consumer_id=None) -> "Subscription":
        check_topic(topic)
        if isinstance(msg_types, str):
            msg_types = (msg_types,)
        with self._cond:
            self._check_open()
            created = self._ensure_topic(topic)
            start = self._committed.get((topic, consumer_id), 0) if consumer_id else 0
        if created:
            self._notify_created(topic)
        return Subscription(self, topic, frozenset(msg_types) if msg_types else None, consumer_id, start)

    def _next(self, sub, timeout):
        with self._cond:
            deadline = None
            while True:
                if sub.closed:
                    return None
                tlog = self._topics[sub.topic]
                if sub.position < tlog.first_offset:
                    sub.position = tlog.first_offset
                skip = sub.position - tlog.first_offset
                for offset, env in itertools.islice(tlog.entries, skip, None):
                    sub.position = offset + 1
                    if sub.msg_types is None or env.msg_type in sub.msg_types:
                        sub._offsets[env.msg_id] = offset
                        return env
                if self._closed:
                    return None
                if timeout is not None:
                    now = time.monotonic()
                    if deadline is None:
                        deadline = now + timeout
                    remaining = deadline - now
                    if remaining <= 0:
                        return None
                    self._cond.wait(remaining)
                else:
                    self._cond.wait()

    def _commit(self, sub, offset):
        if sub.consumer_id is None:
            return
        key = (sub.topic, sub.consumer_id)
        with self._cond:
            if offset + 1 > self._committed.get(key, 0):
                self._committed[key] = offset + 1

    def committed(self, topic, consumer_id):
        with self._cond:
            return self._committed.get((topic, consumer_id), 0)

    def backlog(self, topic):
        with self._cond:
            t = self._topics.get(topic)
            return [env for _, env in t.entries] if t else []

    @property
    def closed(self):
        return self._closed

    def close(self):
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def _wake(self):
        with self._cond:
            self._cond.notify_all()


class Subscription:
    """A cursor over one topic. Iterating blocks until the broker closes."""

    def __init__(self, broker, topic, msg_types, consumer_id, start):
        self.broker = broker
        self.topic = topic
        self.msg_types = msg_types
        self.consumer_id = consumer_id
        self.position = start
        self.closed = False
        self._offsets = {}

    def poll(self, timeout=None):
        """Next matching envelope, or ``None`` after ``timeout`` or on close."""
        return self.broker._next(self, timeout)

    def ack(self, envelope):
        offset = self._offsets.pop(envelope.msg_id, None)
        if offset is not None:
            self.broker._commit(self, offset)

    def close(self):
        self.closed = True
        self.broker._wake()

    def __iter__(self):
        while True:
            env = self.poll()
            if env is None:
                return
            yield env

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
