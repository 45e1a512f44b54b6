"""Domain records passed between pipeline stages, with JSON round-tripping."""

from __future__ import annotations

import datetime as _dt
from dataclasses import dataclass, field

from .validation import check_package_name

VERDICTS = ("Consistent", "Case1", "Case2", "Case3")

UNDECLARED = "undeclared_collection"
UNCONSENTED = "unconsented_declaration"
EXCESSIVE = "excessive_collection"
FINDING_KINDS = (UNDECLARED, UNCONSENTED, EXCESSIVE)

DECLARATION_UNAVAILABLE = "declaration-unavailable"
UNKNOWN_APP_CATEGORY = "unknown-app-category"


def utcnow():
    return _dt.datetime.now(_dt.timezone.utc)


def format_ts(ts):
    return ts.astimezone(_dt.timezone.utc).isoformat().replace("+00:00", "Z")


def parse_ts(s):
    if isinstance(s, _dt.datetime):
        return s
    ts = _dt.datetime.fromisoformat(s.replace("Z", "+00:00"))
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=_dt.timezone.utc)
    return ts


@dataclass(frozen=True)
class RuntimeBehavior:
    package_name: str
    granted: frozenset = frozenset()

    def __post_init__(self):
        check_package_name(self.package_name)
        object.__setattr__(self, "granted", frozenset(self.granted))

    def to_dict(self):
        return {"package_name": self.package_name, "granted": sorted(self.granted)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["package_name"], frozenset(d.get("granted", ())))


@dataclass(frozen=True)
class DeclaredBehavior:
    declared_categories: frozenset = frozenset()
    description: str = ""
    app_category: str = "Unknown"

    def __post_init__(self):
        object.__setattr__(self, "declared_categories", frozenset(self.declared_categories))
        if not self.app_category:
            raise ValueError("app_category must be nonempty")

    def to_dict(self):
        return {
            "declared_categories": sorted(self.declared_categories),
            "description": self.description,
            "app_category": self.app_category,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(frozenset(d.get("declared_categories", ())), d.get("description", ""),
                   d.get("app_category", "Unknown"))


@dataclass(frozen=True)
class Finding:
    kind: str
    permissions: frozenset = frozenset()
    categories: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "permissions", frozenset(self.permissions))
        object.__setattr__(self, "categories", frozenset(self.categories))
        if self.kind not in FINDING_KINDS:
            raise ValueError(f"unknown finding kind {self.kind!r}")
        if not self.categories:
            raise ValueError(f"{self.kind} finding needs at least one category")
        if self.kind == UNDECLARED and not self.permissions:
            raise ValueError("undeclared_collection finding needs permissions")
        if self.kind != UNDECLARED and self.permissions:
            raise ValueError(f"{self.kind} finding must not carry permissions")

    def to_dict(self):
        return {"kind": self.kind, "permissions": sorted(self.permissions), "categories": sorted(self.categories)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], frozenset(d.get("permissions", ())), frozenset(d.get("categories", ())))


def verdict_for(findings) -> str:
    has1 = any(f.kind == UNDECLARED for f in findings)
    has2 = any(f.kind == UNCONSENTED for f in findings)
    return VERDICTS[has1 + 2 * has2]


@dataclass(frozen=True)
class AnalysisResult:
    package_name: str
    matched: tuple  # sorted (permission, category) pairs
    findings: tuple
    verdict: str
    kb_snapshot_version: str
    app_category: str = "Unknown"
    diagnostics: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "matched", tuple(sorted(tuple(m) for m in self.matched)))
        object.__setattr__(self, "findings", tuple(self.findings))
        object.__setattr__(self, "diagnostics", tuple(self.diagnostics))
        if self.verdict not in VERDICTS:
            raise ValueError(f"unknown verdict {self.verdict!r}")
        if verdict_for(self.findings) != self.verdict:
            raise ValueError(f"verdict {self.verdict} contradicts findings "
                             f"(expected {verdict_for(self.findings)})")

    def findings_of(self, kind):
        return [f for f in self.findings if f.kind == kind]

    def to_dict(self):
        return {
            "package_name": self.package_name,
            "matched": [list(m) for m in self.matched],
            "findings": [f.to_dict() for f in self.findings],
            "verdict": self.verdict,
            "kb_snapshot_version": self.kb_snapshot_version,
            "app_category": self.app_category,
            "diagnostics": list(self.diagnostics),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["package_name"], tuple(tuple(m) for m in d["matched"]),
                   tuple(Finding.from_dict(f) for f in d["findings"]), d["verdict"],
                   d["kb_snapshot_version"], d.get("app_category", "Unknown"), tuple(d.get("diagnostics", ())))


@dataclass(frozen=True)
class WarningReport:
    package_name: str
    sentences: tuple
    verdict: str
    generated_at: _dt.datetime = field(default_factory=utcnow, compare=False)
    diagnostics: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "sentences", tuple(self.sentences))
        object.__setattr__(self, "diagnostics", tuple(self.diagnostics))
        if not self.sentences:
            raise ValueError("a warning needs at least one sentence")

    @property
    def text(self):
        return "\n".join(self.sentences)

    def to_dict(self):
        d = {
            "package_name": self.package_name,
            "verdict": self.verdict,
            "sentences": list(self.sentences),
            "generated_at": format_ts(self.generated_at),
        }
        if self.diagnostics:
            d["diagnostics"] = list(self.diagnostics)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["package_name"], tuple(d["sentences"]), d["verdict"], parse_ts(d["generated_at"]),
                   tuple(d.get("diagnostics", ())))
