"""Runtime-vs-declared comparison, case classification, and analyst backends.

A granted permission is *matched* when at least one category it maps to is
declared. Case 1 comes from sensitive permissions none of whose categories
are declared; Case 2 from declared categories no granted permission maps
to. Permissions with an empty mapping play no part in either.
"""

from __future__ import annotations

import json
import logging
import re
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import EndpointError, ResponseValidationError, UnknownCategoryError, UnknownPermissionError
from .knowledge_base import CANONICAL_CATEGORIES
from .models import (
    EXCESSIVE,
    UNCONSENTED,
    UNDECLARED,
    UNKNOWN_APP_CATEGORY,
    AnalysisResult,
    DeclaredBehavior,
    Finding,
    RuntimeBehavior,
    verdict_for,
)
from .retrieval import retrieve_context
from .validation import strip_permission_prefix

log = logging.getLogger(__name__)


def load_relevance(path=None) -> dict[str, frozenset]:
    """Load the app-category -> expected Data Safety categories table."""
    path = Path(path) if path else Path(str(resources.files("grantcheck") / "data" / "relevance.json"))
    doc = json.loads(path.read_text(encoding="utf-8"))
    bad = {c for cats in doc.values() for c in cats if c not in CANONICAL_CATEGORIES}
    if bad:
        raise UnknownCategoryError(bad)
    return {k: frozenset(v) for k, v in doc.items()}


_default_relevance = None


def default_relevance():
    global _default_relevance
    if _default_relevance is None:
        _default_relevance = load_relevance()
    return _default_relevance


def prefilter_runtime(runtime: RuntimeBehavior, kb):
    """Drop permissions the KB does not know; return ``(runtime, diagnostics)``."""
    names = {strip_permission_prefix(g) for g in runtime.granted}
    unknown = sorted(n for n in names if n not in kb.permissions)
    kept = frozenset(n for n in names if n in kb.permissions)
    diags = tuple(f"unknown-permission:{n}" for n in unknown)
    return RuntimeBehavior(runtime.package_name, kept), diags


def compute_matches(runtime: RuntimeBehavior, declared: DeclaredBehavior, kb):
    """Return ``(matched, uncovered_permissions, uncovered_categories)``.

    ``matched`` lists one ``(permission, category)`` pair per declared
    category a granted permission maps to.
    """
    declared_cats = declared.declared_categories
    unknown_cats = declared_cats - set(kb.categories)
    if unknown_cats:
        raise UnknownCategoryError(unknown_cats)
    matched = []
    uncovered_perms = set()
    covered_cats = set()
    for perm in sorted(runtime.granted):
        if perm not in kb.permissions:
            raise UnknownPermissionError(perm)
        cats = kb.mapping.get(perm, frozenset())
        if not cats:
            continue
        hit = cats & declared_cats
        if hit:
            matched.extend((perm, c) for c in sorted(hit))
        else:
            uncovered_perms.add(perm)
        covered_cats |= cats
    uncovered_cats = declared_cats - covered_cats
    return matched, frozenset(uncovered_perms), frozenset(uncovered_cats)


def detect_excessive(declared: DeclaredBehavior, relevance) -> list[Finding]:
    """Flag declared categories outside the app category's expected set."""
    expected = relevance.get(declared.app_category)
    if expected is None:
        return []
    extra = declared.declared_categories - expected
    return [Finding(EXCESSIVE, (), extra)] if extra else []


def detect_inconsistencies(runtime, declared, kb, relevance=None, diagnostics=()) -> AnalysisResult:
    relevance = default_relevance() if relevance is None else relevance
    matched, uncovered_perms, uncovered_cats = compute_matches(runtime, declared, kb)

    findings = []
    by_category: dict[str, set] = {}
    for perm in uncovered_perms:
        for cat in kb.mapping[perm]:
            by_category.setdefault(cat, set()).add(perm)
    for cat in sorted(by_category):
        findings.append(Finding(UNDECLARED, by_category[cat], {cat}))
    if uncovered_cats:
        findings.append(Finding(UNCONSENTED, (), uncovered_cats))

    diags = list(diagnostics)
    if relevance and declared.app_category not in relevance:
        diags.append(f"{UNKNOWN_APP_CATEGORY}:{declared.app_category}")
    findings.extend(detect_excessive(declared, relevance))

    return AnalysisResult(runtime.package_name, matched, findings, verdict_for(findings),
                          kb.snapshot_version, declared.app_category, diags)


class RulesAnalyst(BaseEstimator):
    """Deterministic analyst.

    ``fit`` binds a knowledge base; ``predict`` maps (runtime, declared)
    pairs to verdict labels and ``analyze`` returns the full result.
    """

    def __init__(self, relevance=None):
        self.relevance = relevance

    def fit(self, kb, y=None):
        self.kb_ = kb
        self.relevance_ = default_relevance() if self.relevance is None else self.relevance
        return self

    def analyze(self, runtime, declared, diagnostics=()):
        check_is_fitted(self, "kb_")
        return detect_inconsistencies(runtime, declared, self.kb_, self.relevance_, diagnostics)

    def predict(self, X):
        return [self.analyze(rt, dec).verdict for rt, dec in X]


# ---------------------------------------------------------------- prompting

PROMPT_TEMPLATE = """\
Task: decide whether the Android permissions granted to an app at runtime agree with the sensitive data categories its developer lists in the Google Play Data Safety section.
Inputs: "runtime" is the set of granted permissions; "declared" is the set of Data Safety categories the app says it collects or shares, plus its description and store category.
Definitions:
- Case1: a granted permission reaches sensitive data whose category is not declared.
- Case2: a declared category is not reachable through any granted permission.
- Case3: Case1 and Case2 both hold.
- Consistent: neither Case1 nor Case2 holds.
Also report declared categories that look unrelated to the app's store category as excessive collection.
Answer with JSON only: {{"matched": [[permission, category], ...], "findings": [{{"kind": "undeclared_collection" | "unconsented_declaration" | "excessive_collection", "permissions": [...], "categories": [...]}}], "verdict": "Consistent" | "Case1" | "Case2" | "Case3"}}
Input:
{payload}"""


def build_prompt(runtime: RuntimeBehavior, declared: DeclaredBehavior) -> str:
    payload = {
        "package_name": runtime.package_name,
        "runtime": sorted(runtime.granted),
        "declared": sorted(declared.declared_categories),
        "description": declared.description,
        "app_category": declared.app_category,
    }
    return PROMPT_TEMPLATE.format(payload=json.dumps(payload, indent=2, ensure_ascii=False))


# ---------------------------------------------------------- external analyst

class HttpGenerationClient:
    """POSTs ``{"model", "prompt", "stream": false}`` and returns ``response``.

    This is the request shape of Ollama's ``/api/generate``; each call is
    independent, so one client may serve many threads.
    """

    def __init__(self, url, model="llama3", timeout=60.0):
        self.url = url
        self.model = model
        self.timeout = timeout

    def generate(self, prompt, timeout=None):
        body = json.dumps({"model": self.model, "prompt": prompt, "stream": False, "format": "json"}).encode()
        req = urllib.request.Request(self.url, data=body, headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=timeout or self.timeout) as resp:
                doc = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            raise EndpointError(f"text-generation endpoint {self.url} failed: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise EndpointError(f"endpoint {self.url} returned non-JSON: {exc}") from exc
        if "response" not in doc:
            raise EndpointError(f"endpoint {self.url} reply has no 'response' field")
        return doc["response"]


_FENCE_RE = re.compile(r"```(?:json)?\s*(.*?)```", re.S)


def _extract_json(raw):
    try:
        return json.loads(raw)
    except (json.JSONDecodeError, TypeError):
        pass
    m = _FENCE_RE.search(raw or "")
    if m:
        try:
            return json.loads(m.group(1))
        except json.JSONDecodeError:
            pass
    start, end = (raw or "").find("{"), (raw or "").rfind("}")
    if start != -1 and end > start:
        try:
            return json.loads(raw[start:end + 1])
        except json.JSONDecodeError:
            pass
    raise ResponseValidationError("response is not JSON", raw)


def parse_analyst_response(raw, runtime, declared, kb, diagnostics=()) -> AnalysisResult:
    """Turn a model reply into a validated AnalysisResult."""
    doc = _extract_json(raw)
    if not isinstance(doc, dict):
        raise ResponseValidationError("response must be a JSON object", raw)
    for key in ("matched", "findings", "verdict"):
        if key not in doc:
            raise ResponseValidationError(f"response lacks {key!r}", raw)
    try:
        matched = []
        for m in doc["matched"]:
            if isinstance(m, dict):
                m = (m["permission"], m["category"])
            perm, cat = m
            if perm not in runtime.granted:
                raise ValueError(f"matched permission {perm!r} was not granted")
            if cat not in declared.declared_categories:
                raise ValueError(f"matched category {cat!r} was not declared")
            matched.append((perm, cat))
        findings = [Finding.from_dict(f) for f in doc["findings"]]
        known = kb.known_categories
        for f in findings:
            if f.categories - known:
                raise ValueError(f"unknown categories {sorted(f.categories - known)}")
            if f.permissions - runtime.granted:
                raise ValueError(f"finding names ungranted permissions {sorted(f.permissions - runtime.granted)}")
        return AnalysisResult(runtime.package_name, matched, findings, doc["verdict"], kb.snapshot_version,
                              declared.app_category, diagnostics)
    except (ValueError, KeyError, TypeError) as exc:
        raise ResponseValidationError(f"response failed validation: {exc}", raw) from None


class ExternalAnalyst:
    """Generative analyst behind a text-generation client.

    ``client`` is anything with ``generate(prompt, timeout=None) -> str``.
    """

    def __init__(self, client, kb, index=None, use_retrieval=True, k=None, timeout=60.0):
        if use_retrieval and index is None:
            raise ValueError("retrieval needs an index")
        self.client = client
        self.kb = kb
        self.index = index
        self.use_retrieval = use_retrieval
        self.k = k
        self.timeout = timeout

    def final_prompt(self, runtime, declared):
        p = build_prompt(runtime, declared)
        if not self.use_retrieval:
            return p
        return retrieve_context(self.index, self.kb, p, runtime.granted, declared.declared_categories,
                                self.k).final_prompt

    def analyze(self, runtime, declared, diagnostics=()):
        prompt = self.final_prompt(runtime, declared)
        raw = self.client.generate(prompt, timeout=self.timeout)
        return parse_analyst_response(raw, runtime, declared, self.kb, diagnostics)


@dataclass
class AnalysisOptions:
    analyst: str = "rules"
    use_retrieval: bool = True
    fallback_to_rules: bool = False
    client: object = None
    k: int | None = None
    timeout: float = 60.0
    relevance: dict | None = field(default=None, repr=False)


@dataclass(frozen=True)
class AnalysisRequest:
    runtime: RuntimeBehavior
    declared: DeclaredBehavior
    diagnostics: tuple = ()


def analyze(request: AnalysisRequest, kb, index=None, options: AnalysisOptions | None = None) -> AnalysisResult:
    """Run the configured analyst on one request.

    Unknown permissions are stripped first and reported as diagnostics.
    """
    options = options or AnalysisOptions()
    runtime, diags = prefilter_runtime(request.runtime, kb)
    diags = tuple(request.diagnostics) + diags
    if options.analyst == "rules":
        return detect_inconsistencies(runtime, request.declared, kb, options.relevance, diags)
    if options.analyst != "external":
        raise ValueError(f"unknown analyst {options.analyst!r}")
    if options.client is None:
        raise ValueError("external analyst needs a text-generation client")
    ext = ExternalAnalyst(options.client, kb, index, options.use_retrieval, options.k, options.timeout)
    try:
        return ext.analyze(runtime, request.declared, diags)
    except (EndpointError, ResponseValidationError) as exc:
        if not options.fallback_to_rules:
            raise
        log.warning("external analyst failed for %s, falling back to rules: %s", runtime.package_name, exc)
        return detect_inconsistencies(runtime, request.declared, kb, options.relevance,
                                      diags + ("analyst-fallback",))
