"""The external knowledge database: permissions, data-safety taxonomy, mapping.

Built from documentation snapshot files (one JSON array per Android
version), a taxonomy file for the 14 Data Safety categories, and a curated
permission -> category mapping. The resulting :class:`KnowledgeBase` is
immutable.
"""

from __future__ import annotations

import functools
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping

from .exceptions import ContradictorySnapshotError, SnapshotError, UnknownPermissionError
from .validation import ANDROID_VERSIONS, PERMISSION_NAME_RE

PROTECTION_LEVELS = ("normal", "dangerous")

CANONICAL_CATEGORIES = (
    "Location",
    "Personal info",
    "Financial info",
    "Health and fitness",
    "Messages",
    "Photos and videos",
    "Audio",
    "Files and docs",
    "Calendar",
    "Contacts",
    "App activity",
    "Web browsing",
    "App info and performance",
    "Device or other IDs",
)


@dataclass(frozen=True)
class Permission:
    name: str
    description: str
    protection_level: str
    versions: frozenset = field(default_factory=frozenset)

    def to_dict(self):
        return {
            "name": self.name,
            "description": self.description,
            "protection_level": self.protection_level,
            "versions": sorted(self.versions),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], d["description"], d["protection_level"], frozenset(d["versions"]))


@dataclass(frozen=True)
class SensitiveCategory:
    name: str
    data_types: tuple  # of (type_name, definition)

    def definition_text(self):
        return "; ".join(f"{t}: {d}" for t, d in self.data_types)


def _read_json(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise SnapshotError(f"missing file: {path}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise SnapshotError(f"{path}: malformed JSON at line {exc.lineno}: {exc.msg}") from None


def load_permission_snapshot(path) -> list[Permission]:
    """Parse one snapshot file. Duplicates are preserved."""
    doc = _read_json(path)
    if not isinstance(doc, list):
        raise SnapshotError(f"{path}: snapshot must be a JSON array")
    out = []
    for i, rec in enumerate(doc):
        where = f"{path}: record {i}"
        if not isinstance(rec, dict):
            raise SnapshotError(f"{where}: expected an object")
        missing = [k for k in ("name", "description", "protection_level", "android_version") if k not in rec]
        if missing:
            raise SnapshotError(f"{where}: missing fields {missing}")
        name = rec["name"]
        if not isinstance(name, str) or not PERMISSION_NAME_RE.match(name):
            raise SnapshotError(f"{where}: ill-formed permission name {name!r}")
        level = rec["protection_level"]
        if level not in PROTECTION_LEVELS:
            raise SnapshotError(f"{where}: unknown protection level {level!r}")
        raw_versions = rec["android_version"]
        if not isinstance(raw_versions, list):
            raw_versions = [raw_versions]
        if not raw_versions:
            raise SnapshotError(f"{where}: no android version")
        for v in raw_versions:
            if isinstance(v, bool) or not isinstance(v, int) or v not in ANDROID_VERSIONS:
                raise SnapshotError(f"{where}: android version out of range 10-15: {v!r}")
        desc = rec["description"]
        if not isinstance(desc, str):
            raise SnapshotError(f"{where}: description must be a string")
        out.append(Permission(name, desc, level, frozenset(raw_versions)))
    return out


def dedupe_permissions(entries: Iterable[Permission]) -> dict[str, Permission]:
    """Merge entries by name into a registry sorted by name.

    Versions are unioned; text and protection level come from the entry
    carrying the highest version.
    """
    by_name: dict[str, list[Permission]] = {}
    for p in entries:
        by_name.setdefault(p.name, []).append(p)

    registry = {}
    for name in sorted(by_name):
        group = by_name[name]
        level_at: dict[int, str] = {}
        for p in group:
            for v in p.versions:
                seen = level_at.setdefault(v, p.protection_level)
                if seen != p.protection_level:
                    raise ContradictorySnapshotError(
                        f"contradictory snapshot: {name} is both {seen} and {p.protection_level} in Android {v}"
                    )
        versions = frozenset(level_at)
        top = max(versions)
        # several entries may carry the top version; min() keeps the choice order-free
        newest = min((p for p in group if top in p.versions), key=lambda p: p.description)
        registry[name] = Permission(name, newest.description, newest.protection_level, versions)
    return registry


def load_taxonomy(path) -> dict[str, SensitiveCategory]:
    doc = _read_json(path)
    if not isinstance(doc, dict):
        raise SnapshotError(f"{path}: taxonomy must be a JSON object")
    out = {}
    for name, types in doc.items():
        if not isinstance(types, list):
            raise SnapshotError(f"{path}: category {name!r}: data types must be an array")
        pairs = []
        for t in types:
            try:
                pairs.append((t["type_name"], t["definition"]))
            except (KeyError, TypeError):
                raise SnapshotError(f"{path}: category {name!r}: bad data type record {t!r}") from None
        out[name] = SensitiveCategory(name, tuple(pairs))
    return out


def load_mapping(path) -> dict[str, frozenset]:
    doc = _read_json(path)
    if not isinstance(doc, dict):
        raise SnapshotError(f"{path}: mapping must be a JSON object")
    out = {}
    for name, cats in doc.items():
        if not isinstance(cats, list) or not all(isinstance(c, str) for c in cats):
            raise SnapshotError(f"{path}: mapping for {name!r} must be an array of category names")
        out[name] = frozenset(cats)
    return out


class KnowledgeBase:
    """Immutable permission registry + category registry + mapping.

    ``supplementary`` holds sensitive categories that the mapping may point
    to but that have no Data Safety counterpart (``Call logs``), so a
    developer can never declare them.
    """

    def __init__(self, permissions: Mapping[str, Permission], categories: Mapping[str, SensitiveCategory],
                 mapping: Mapping[str, Iterable[str]], snapshot_version: str,
                 supplementary: Mapping[str, SensitiveCategory] | None = None):
        self.permissions = MappingProxyType(dict(sorted(permissions.items())))
        self.categories = MappingProxyType(dict(categories))
        self.supplementary = MappingProxyType(dict(supplementary or {}))
        self.mapping = MappingProxyType({k: frozenset(v) for k, v in sorted(mapping.items())})
        self.snapshot_version = snapshot_version

    def __repr__(self):
        return (f"KnowledgeBase(permissions={len(self.permissions)}, categories={len(self.categories)}, "
                f"snapshot_version={self.snapshot_version!r})")

    @property
    def known_categories(self):
        """Every category name the mapping may legally reference."""
        return frozenset(self.categories) | frozenset(self.supplementary)

    def category(self, name):
        if name in self.categories:
            return self.categories[name]
        return self.supplementary[name]

    def categories_for(self, perm_name):
        return map_permission_to_categories(perm_name, self)

    def is_sensitive(self, perm_name):
        return bool(self.categories_for(perm_name))

    def to_bundle(self):
        def cats(reg):
            return {c.name: [{"type_name": t, "definition": d} for t, d in c.data_types] for c in reg.values()}

        return {
            "snapshot_version": self.snapshot_version,
            "permissions": [p.to_dict() for p in self.permissions.values()],
            "taxonomy": cats(self.categories),
            "supplementary_categories": cats(self.supplementary),
            "mapping": {k: sorted(v) for k, v in self.mapping.items()},
        }

    @classmethod
    def from_bundle(cls, doc):
        def cats(d):
            return {n: SensitiveCategory(n, tuple((t["type_name"], t["definition"]) for t in ts)) for n, ts in d.items()}

        perms = {p["name"]: Permission.from_dict(p) for p in doc["permissions"]}
        return cls(perms, cats(doc["taxonomy"]), doc["mapping"], doc["snapshot_version"],
                   cats(doc.get("supplementary_categories", {})))


def map_permission_to_categories(perm_name: str, kb: KnowledgeBase) -> frozenset:
    if perm_name not in kb.permissions:
        raise UnknownPermissionError(perm_name)
    return kb.mapping.get(perm_name, frozenset())


def validate_kb(kb: KnowledgeBase) -> list[str]:
    """Return every invariant violation found; an empty list means valid."""
    problems = []
    names = set(kb.categories)
    if len(names) != len(CANONICAL_CATEGORIES):
        problems.append(f"expected {len(CANONICAL_CATEGORIES)} categories, found {len(names)}")
    for missing in sorted(set(CANONICAL_CATEGORIES) - names):
        problems.append(f"missing category {missing!r}")
    for extra in sorted(names - set(CANONICAL_CATEGORIES)):
        problems.append(f"category {extra!r} is not a Data Safety category")
    for clash in sorted(names & set(kb.supplementary)):
        problems.append(f"supplementary category {clash!r} shadows a Data Safety category")

    for reg in (kb.categories, kb.supplementary):
        for cat in reg.values():
            if not cat.data_types:
                problems.append(f"category {cat.name!r} has no data types")
            type_names = [t for t, _ in cat.data_types]
            if len(type_names) != len(set(type_names)):
                problems.append(f"category {cat.name!r} has duplicate data type names")

    for p in kb.permissions.values():
        if not PERMISSION_NAME_RE.match(p.name):
            problems.append(f"permission {p.name!r}: ill-formed name")
        if p.protection_level not in PROTECTION_LEVELS:
            problems.append(f"permission {p.name}: unknown protection level {p.protection_level!r}")
        if not p.versions:
            problems.append(f"permission {p.name}: no versions")
        elif not all(v in ANDROID_VERSIONS for v in p.versions):
            problems.append(f"permission {p.name}: version outside 10-15")

    known = kb.known_categories
    for perm, cats in kb.mapping.items():
        if perm not in kb.permissions:
            problems.append(f"mapping references unknown permission {perm!r}")
        for c in sorted(cats - known):
            problems.append(f"mapping for {perm} references unknown category {c!r}")
    return problems


def _default_kb_dir():
    return Path(str(resources.files("grantcheck") / "data" / "kb"))


def build_kb(kb_dir=None, *, snapshot_version=None) -> KnowledgeBase:
    """Assemble a knowledge base from a directory holding ``manifest.json``.

    Without a manifest, every ``permissions_*.json`` file is read and the
    other sources use their default names. The snapshot version falls back
    to a content hash of the sources.
    """
    kb_dir = Path(kb_dir) if kb_dir is not None else _default_kb_dir()
    manifest_path = kb_dir / "manifest.json"
    if manifest_path.exists():
        manifest = _read_json(manifest_path)
    else:
        manifest = {
            "permission_snapshots": sorted(p.name for p in kb_dir.glob("permissions_*.json")),
            "taxonomy": "taxonomy.json",
            "supplementary_categories": "supplementary_categories.json",
            "mapping": "mapping.json",
        }
    snapshots = manifest.get("permission_snapshots", [])
    if not snapshots:
        raise SnapshotError(f"{kb_dir}: no permission snapshots")

    entries = []
    digest = hashlib.sha256()
    for rel in snapshots:
        entries.extend(load_permission_snapshot(kb_dir / rel))
        digest.update((kb_dir / rel).read_bytes())
    categories = load_taxonomy(kb_dir / manifest["taxonomy"])
    supp_name = manifest.get("supplementary_categories")
    supplementary = load_taxonomy(kb_dir / supp_name) if supp_name and (kb_dir / supp_name).exists() else {}
    mapping = load_mapping(kb_dir / manifest["mapping"])
    for rel in (manifest["taxonomy"], manifest["mapping"]):
        digest.update((kb_dir / rel).read_bytes())

    version = snapshot_version or manifest.get("snapshot_version") or "sha256:" + digest.hexdigest()[:16]
    return KnowledgeBase(dedupe_permissions(entries), categories, mapping, version, supplementary)


def load_kb(path=None) -> KnowledgeBase:
    """Load a KB from a source directory, a bundle file, or the bundled data."""
    if path is None:
        return default_kb()
    path = Path(path)
    if path.is_dir():
        return build_kb(path)
    return KnowledgeBase.from_bundle(_read_json(path))


@functools.lru_cache(maxsize=1)
def default_kb() -> KnowledgeBase:
    return build_kb()
