"""Analysis cache and device registry.

Layout of a :class:`JsonlStore` directory::

    <dir>/analyses.jsonl   one record per line: {"op": "put", "key": ..., "record": {...}}
                           or {"op": "del", "key": ...}
    <dir>/devices.jsonl    {"op": "put", "key": <device_id>, "record": {...}}

Each file is an append-only log replayed on open, last write per key
winning. A line is appended, flushed and fsynced before the in-memory view
changes, so a crash leaves either the whole record or a torn final line,
which replay ignores. :meth:`JsonlStore.compact` rewrites a keyspace
through a temporary file and ``os.replace``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
from concurrent.futures import Future
from dataclasses import dataclass
from pathlib import Path

from .bus import topic_name
from .models import AnalysisResult, DeclaredBehavior, RuntimeBehavior, WarningReport, format_ts, utcnow
from .validation import check_device_id, check_package_name

log = logging.getLogger(__name__)

ANALYSES = "analyses"
DEVICES = "devices"


def grants_digest(granted):
    return hashlib.sha256("\n".join(sorted(granted)).encode("utf-8")).hexdigest()


def cache_key(package_name, granted, kb_snapshot_version):
    return f"{package_name}|{grants_digest(granted)}|{kb_snapshot_version}"


@dataclass(frozen=True)
class CachedAnalysis:
    package_name: str
    runtime: RuntimeBehavior
    declared: DeclaredBehavior
    result: AnalysisResult
    warning: WarningReport
    stored_at: str
    kb_snapshot_version: str

    def __post_init__(self):
        if self.package_name != self.result.package_name:
            raise ValueError("cache key does not match the result's package")
        if self.kb_snapshot_version != self.result.kb_snapshot_version:
            raise ValueError("cache entry and result disagree on the KB snapshot")

    @property
    def key(self):
        return cache_key(self.package_name, self.runtime.granted, self.kb_snapshot_version)

    def to_dict(self):
        return {
            "package_name": self.package_name,
            "runtime": self.runtime.to_dict(),
            "declared": self.declared.to_dict(),
            "result": self.result.to_dict(),
            "warning": self.warning.to_dict(),
            "stored_at": self.stored_at,
            "kb_snapshot_version": self.kb_snapshot_version,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["package_name"], RuntimeBehavior.from_dict(d["runtime"]),
                   DeclaredBehavior.from_dict(d["declared"]), AnalysisResult.from_dict(d["result"]),
                   WarningReport.from_dict(d["warning"]), d["stored_at"], d["kb_snapshot_version"])


@dataclass(frozen=True)
class DeviceSession:
    device_id: str
    topic: str
    created_at: str

    def to_dict(self):
        return {"device_id": self.device_id, "topic": self.topic, "created_at": self.created_at}

    @classmethod
    def from_dict(cls, d):
        return cls(d["device_id"], d["topic"], d["created_at"])


class MemoryStore:
    """Keyspace -> key -> record dict. Base class for the file store."""

    def __init__(self):
        self._data = {ANALYSES: {}, DEVICES: {}}
        self._lock = threading.RLock()
        self._inflight: dict[str, Future] = {}
        self.hits = 0
        self.misses = 0

    # raw persistence hooks; the file store overrides these
    def _persist_put(self, keyspace, key, record):
        pass

    def _persist_del(self, keyspace, keys):
        pass

    def _put(self, keyspace, key, record):
        with self._lock:
            self._persist_put(keyspace, key, record)
            self._data[keyspace][key] = record

    # analyses -----------------------------------------------------------
    def lookup(self, package_name, granted, kb_snapshot_version):
        rec = self._data[ANALYSES].get(cache_key(package_name, granted, kb_snapshot_version))
        return CachedAnalysis.from_dict(rec) if rec is not None else None

    def get_or_insert(self, package_name, runtime: RuntimeBehavior, compute, kb_snapshot_version):
        """Return ``(CachedAnalysis, cache_hit)``.

        ``compute()`` must return ``(declared, result, warning)``. Concurrent
        callers for the same key share a single computation.
        """
        check_package_name(package_name)
        key = cache_key(package_name, runtime.granted, kb_snapshot_version)
        with self._lock:
            rec = self._data[ANALYSES].get(key)
            if rec is not None:
                self.hits += 1
                return CachedAnalysis.from_dict(rec), True
            fut = self._inflight.get(key)
            owner = fut is None
            if owner:
                fut = self._inflight[key] = Future()
                self.misses += 1
        if not owner:
            entry = fut.result()
            return entry, False

        try:
            declared, result, warning = compute()
            entry = CachedAnalysis(package_name, runtime, declared, result, warning,
                                   format_ts(utcnow()), kb_snapshot_version)
        except BaseException as exc:
            with self._lock:
                del self._inflight[key]
            fut.set_exception(exc)
            raise
        try:
            self._put(ANALYSES, key, entry.to_dict())
        except OSError:
            log.exception("could not store analysis for %s", package_name)
        with self._lock:
            del self._inflight[key]
        fut.set_result(entry)
        return entry, False

    def entries(self):
        with self._lock:
            return [CachedAnalysis.from_dict(r) for r in self._data[ANALYSES].values()]

    def evict(self, target):
        """Drop entries whose package name or KB snapshot version equals ``target``."""
        with self._lock:
            keys = [k for k, r in self._data[ANALYSES].items()
                    if r["package_name"] == target or r["kb_snapshot_version"] == target]
            if keys:
                self._persist_del(ANALYSES, keys)
                for k in keys:
                    del self._data[ANALYSES][k]
            return len(keys)

    # devices ------------------------------------------------------------
    def register_device(self, device_id) -> DeviceSession:
        check_device_id(device_id)
        with self._lock:
            rec = self._data[DEVICES].get(device_id)
            if rec is not None:
                return DeviceSession.from_dict(rec)
            session = DeviceSession(device_id, topic_name(device_id), format_ts(utcnow()))
            self._put(DEVICES, device_id, session.to_dict())
            return session

    def devices(self):
        with self._lock:
            return [DeviceSession.from_dict(r) for r in self._data[DEVICES].values()]

    def close(self):
        pass


class JsonlStore(MemoryStore):
    """Directory-backed store: one append-only JSONL log per keyspace."""

    def __init__(self, path, fsync=True):
        super().__init__()
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.fsync = fsync
        self._files = {}
        for ks in (ANALYSES, DEVICES):
            self._data[ks] = self._replay(self._file(ks))
            self._files[ks] = open(self._file(ks), "a", encoding="utf-8")

    def _file(self, keyspace):
        return self.path / f"{keyspace}.jsonl"

    @staticmethod
    def _replay(path):
        data = {}
        if not path.exists():
            return data
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                try:
                    op = json.loads(line)
                except json.JSONDecodeError:
                    log.warning("%s:%d: skipping torn record", path, lineno)
                    continue
                if op.get("op") == "put":
                    data[op["key"]] = op["record"]
                elif op.get("op") == "del":
                    data.pop(op["key"], None)
        return data

    def _append(self, keyspace, lines):
        fh = self._files[keyspace]
        fh.write("".join(json.dumps(op, sort_keys=True, ensure_ascii=False) + "\n" for op in lines))
        fh.flush()
        if self.fsync:
            os.fsync(fh.fileno())

    def _persist_put(self, keyspace, key, record):
        self._append(keyspace, [{"op": "put", "key": key, "record": record}])

    def _persist_del(self, keyspace, keys):
        self._append(keyspace, [{"op": "del", "key": k} for k in keys])

    def compact(self):
        with self._lock:
            for ks in (ANALYSES, DEVICES):
                self._files[ks].close()
                tmp = self._file(ks).with_suffix(".jsonl.tmp")
                with open(tmp, "w", encoding="utf-8") as fh:
                    for key, rec in self._data[ks].items():
                        fh.write(json.dumps({"op": "put", "key": key, "record": rec}, sort_keys=True,
                                            ensure_ascii=False) + "\n")
                    fh.flush()
                    os.fsync(fh.fileno())
                os.replace(tmp, self._file(ks))
                self._files[ks] = open(self._file(ks), "a", encoding="utf-8")

    def close(self):
        with self._lock:
            for fh in self._files.values():
                fh.close()


def open_store(path=None, fsync=True):
    return JsonlStore(path, fsync=fsync) if path else MemoryStore()
