"""Declared-behavior ingestion from store fixture files.

A fixture is ``{package_name, data_safety: [...], description, app_category}``.
Category strings pass through an alias table before being checked against
the 14 Data Safety names. A live store client would implement
:class:`DeclaredSource` the same way; none ships here.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .exceptions import DeclarationUnavailable, SnapshotError, UnknownCategoryError
from .knowledge_base import CANONICAL_CATEGORIES
from .models import DECLARATION_UNAVAILABLE, DeclaredBehavior, format_ts, utcnow
from .validation import check_package_name

log = logging.getLogger(__name__)

_DATA = resources.files("grantcheck") / "data"


def default_fixture_dir():
    return Path(str(_DATA / "fixtures"))


def load_aliases(path=None):
    path = Path(path) if path else Path(str(_DATA / "aliases.json"))
    return json.loads(path.read_text(encoding="utf-8"))


def normalize_category(raw, aliases):
    """Map a raw category label to its canonical name, or ``None``."""
    s = " ".join(str(raw).split())
    if s in CANONICAL_CATEGORIES:
        return s
    if s in aliases:
        return aliases[s]
    folded = {k.casefold(): v for k, v in aliases.items()}
    folded.update({c.casefold(): c for c in CANONICAL_CATEGORIES})
    return folded.get(s.casefold())


def normalize_categories(raw_list, aliases):
    out, bad = set(), []
    for raw in raw_list:
        canon = normalize_category(raw, aliases)
        if canon is None or canon not in CANONICAL_CATEGORIES:
            bad.append(str(raw))
        else:
            out.add(canon)
    if bad:
        raise UnknownCategoryError(bad)
    return frozenset(out)


@dataclass(frozen=True)
class DeclaredFixture:
    package_name: str
    declared_categories: tuple
    description: str
    app_category: str
    source: str = "fixture"
    fetched_at: str = ""

    def to_behavior(self):
        return DeclaredBehavior(frozenset(self.declared_categories), self.description, self.app_category)

    def to_dict(self):
        return {
            "package_name": self.package_name,
            "data_safety": list(self.declared_categories),
            "description": self.description,
            "app_category": self.app_category,
        }


def fixture_path(package_name, fixture_dir):
    return Path(fixture_dir) / f"{package_name}.json"


def read_fixture(package_name, fixture_dir, aliases=None) -> DeclaredFixture:
    check_package_name(package_name)
    path = fixture_path(package_name, fixture_dir)
    if not path.is_file():
        raise DeclarationUnavailable(package_name)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SnapshotError(f"{path}: malformed JSON at line {exc.lineno}: {exc.msg}") from None
    if doc.get("package_name", package_name) != package_name:
        raise SnapshotError(f"{path}: fixture is for {doc['package_name']!r}, not {package_name!r}")
    aliases = load_aliases() if aliases is None else aliases
    cats = normalize_categories(doc.get("data_safety", []), aliases)
    app_category = doc.get("app_category") or "Unknown"
    return DeclaredFixture(package_name, tuple(sorted(cats)), doc.get("description", ""), app_category,
                           "fixture", format_ts(utcnow()))


def load_declared(package_name, fixture_dir=None, aliases=None) -> DeclaredBehavior:
    """Load and normalize the declared behavior for one package.

    Raises :class:`DeclarationUnavailable` when no fixture exists and
    :class:`UnknownCategoryError` when a category survives aliasing unknown.
    """
    fixture_dir = fixture_dir if fixture_dir is not None else default_fixture_dir()
    return read_fixture(package_name, fixture_dir, aliases).to_behavior()


class DeclaredSource:
    """Fixture-backed source; missing declarations degrade to an empty one."""

    def __init__(self, fixture_dir=None, aliases=None):
        self.fixture_dir = Path(fixture_dir) if fixture_dir is not None else default_fixture_dir()
        self.aliases = load_aliases() if aliases is None else aliases

    def fetch(self, package_name):
        """Return ``(DeclaredBehavior, diagnostics)``."""
        try:
            return load_declared(package_name, self.fixture_dir, self.aliases), ()
        except DeclarationUnavailable:
            log.warning("declared behavior unavailable for %s", package_name)
            return DeclaredBehavior(), (DECLARATION_UNAVAILABLE,)
