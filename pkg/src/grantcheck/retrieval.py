"""Similarity index over the knowledge base and prompt assembly.

The default embedding is lexical TF-IDF fitted on the KB corpus;
:class:`KnowledgeIndex` accepts any estimator exposing ``fit``/``transform``
on lists of strings (with L2-normalized rows) in its place.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.feature_extraction.text import TfidfVectorizer
from sklearn.utils.validation import check_is_fitted

from .exceptions import IndexBuildError, UnknownEntryError

CATEGORY_PREFIX = "category:"
CONTEXT_SEPARATOR = "\n\n### Retrieved knowledge\n"
MAX_K = 32

_SCORE_DECIMALS = 12


def normalize_text(text):
    """Lowercase and split identifiers so READ_CALENDAR reads as 'read calendar'."""
    return re.sub(r"[_\s]+", " ", text.lower()).strip()


def text_head(text):
    """The identifier a text leads with: everything before the first ``": "``."""
    return text.split(": ", 1)[0]


class LexicalEmbedder(BaseEstimator, TransformerMixin):
    """Two-field TF-IDF featurizer with identifier normalization.

    A vector is the concatenation of a name field (word 1-3 grams of
    :func:`text_head`) and a body field (words of the full text), scaled so
    that the dot product of two outputs is
    ``name_weight * cos_name + (1 - name_weight) * cos_body``. Both fields
    come from the text alone, so an entry's own text reproduces its vector
    and a bare identifier such as ``BODY_SENSORS`` lands on its entry.
    """

    def __init__(self, name_weight=0.7, name_ngrams=3, sublinear_tf=True):
        self.name_weight = name_weight
        self.name_ngrams = name_ngrams
        self.sublinear_tf = sublinear_tf

    def _vectorizer(self, ngrams):
        return TfidfVectorizer(
            preprocessor=normalize_text,
            token_pattern=r"(?u)\b\w+\b",
            ngram_range=(1, ngrams),
            sublinear_tf=self.sublinear_tf,
            norm="l2",
            dtype=np.float64,
        )

    def fit(self, X, y=None):
        X = list(X)
        names = [text_head(x) for x in X]
        if not 0.0 <= self.name_weight <= 1.0:
            raise ValueError("name_weight must lie in [0, 1]")
        self.name_vectorizer_ = self._vectorizer(self.name_ngrams).fit(names)
        self.body_vectorizer_ = self._vectorizer(1).fit(X)
        self.n_features_ = len(self.name_vectorizer_.vocabulary_) + len(self.body_vectorizer_.vocabulary_)
        return self

    def transform(self, X):
        check_is_fitted(self, "body_vectorizer_")
        X = list(X)
        names = [text_head(x) for x in X]
        a = np.sqrt(self.name_weight)
        b = np.sqrt(1.0 - self.name_weight)
        n = self.name_vectorizer_.transform(names).toarray()
        t = self.body_vectorizer_.transform(X).toarray()
        return np.hstack([a * n, b * t])

    def embed(self, text):
        if not isinstance(text, str) or not text.strip():
            raise ValueError("cannot embed empty text")
        return self.transform([text])[0]


def _entry_texts(kb):
    ids, texts, bad = [], [], []
    for p in kb.permissions.values():
        if not p.description.strip():
            bad.append(p.name)
        ids.append(p.name)
        texts.append(f"{p.name}: {p.description}")
    for c in kb.categories.values():
        eid = CATEGORY_PREFIX + c.name
        defs = c.definition_text()
        if not defs.strip():
            bad.append(eid)
        ids.append(eid)
        texts.append(f"{c.name}: {defs}")
    return ids, texts, bad


class KnowledgeIndex(BaseEstimator):
    """One vector per permission and per Data Safety category of a KB."""

    def __init__(self, embedder=None):
        self.embedder = embedder

    def fit(self, kb, y=None):
        ids, texts, bad = _entry_texts(kb)
        if not ids:
            raise IndexBuildError("knowledge base is empty")
        if bad:
            raise IndexBuildError("entries with empty text: " + ", ".join(bad), bad)
        embedder = self.embedder if self.embedder is not None else LexicalEmbedder()
        vectors = embedder.fit(texts).transform(texts)
        vectors = np.asarray(vectors, dtype=np.float64)
        norms = np.linalg.norm(vectors, axis=1)
        zero = [i for i, n in zip(ids, norms) if n == 0]
        if zero:
            raise IndexBuildError("entries with a zero vector: " + ", ".join(zero), zero)
        self.embedder_ = embedder
        self.entry_ids_ = tuple(ids)
        self.texts_ = tuple(texts)
        self.vectors_ = vectors
        self.kb_snapshot_version_ = kb.snapshot_version
        return self

    def __len__(self):
        check_is_fitted(self, "vectors_")
        return len(self.entry_ids_)

    def embed(self, text):
        check_is_fitted(self, "embedder_")
        return self.embedder_.embed(text)

    def scores(self, query):
        q = self.embed(query)
        return np.clip(np.round(self.vectors_ @ q, _SCORE_DECIMALS), 0.0, 1.0)

    def retrieve(self, query, k):
        """Top-``k`` entries as ``(entry_id, score)``; ties go to the smaller id."""
        if isinstance(k, bool) or not isinstance(k, (int, np.integer)) or k < 1:
            raise ValueError(f"k must be a positive integer, got {k!r}")
        s = self.scores(query)
        order = sorted(range(len(s)), key=lambda i: (-s[i], self.entry_ids_[i]))
        return [(self.entry_ids_[i], float(s[i])) for i in order[:k]]

    def dump(self):
        """Debug dump: entry id -> vector."""
        check_is_fitted(self, "vectors_")
        return json.dumps({e: v.tolist() for e, v in zip(self.entry_ids_, self.vectors_)})


def build_index(kb, embedder=None):
    return KnowledgeIndex(embedder=embedder).fit(kb)


def embed(text, index):
    return index.embed(text)


def retrieve(index, query, k):
    return index.retrieve(query, k)


@dataclass(frozen=True)
class RetrievalContext:
    query_prompt: str
    retrieved: tuple  # of (entry_id, score, decoded_text)
    final_prompt: str


def decode_entry(entry_id, kb):
    if entry_id.startswith(CATEGORY_PREFIX):
        name = entry_id[len(CATEGORY_PREFIX):]
        if name in kb.categories or name in kb.supplementary:
            return kb.category(name).definition_text()
    elif entry_id in kb.permissions:
        return kb.permissions[entry_id].description
    raise UnknownEntryError(entry_id)


def assemble_final_prompt(p, retrieved, kb) -> RetrievalContext:
    """Append each retrieved entry's text to ``p`` under an ``<entry_id>: `` header."""
    if not p:
        raise ValueError("prompt must be nonempty")
    decoded = tuple((eid, score, decode_entry(eid, kb)) for eid, score in retrieved)
    if not decoded:
        return RetrievalContext(p, (), p)
    body = "\n".join(f"{eid}: {text}" for eid, _, text in decoded)
    return RetrievalContext(p, decoded, p + CONTEXT_SEPARATOR + body)


def default_k(n_granted, n_declared):
    return max(1, min(MAX_K, n_granted + n_declared))


def retrieve_context(index, kb, p, granted, declared_categories, k=None) -> RetrievalContext:
    """Build Final_prompt for an analysis request.

    One similarity query per known granted permission, then one per
    declared category, each taking its best hit. Permissions come first
    when ``k`` truncates; the kept hits are then ranked by score.
    """
    items = [g for g in sorted(granted) if g in kb.permissions]
    items += [CATEGORY_PREFIX + c for c in sorted(declared_categories)]
    k = default_k(len(granted), len(declared_categories)) if k is None else k
    hits, seen = [], set()
    for item in items:
        query = item[len(CATEGORY_PREFIX):] if item.startswith(CATEGORY_PREFIX) else item
        for eid, score in index.retrieve(query, 1):
            if eid not in seen:
                seen.add(eid)
                hits.append((eid, score))
        if len(hits) >= k:
            break
    hits = sorted(hits[:k], key=lambda h: (-h[1], h[0]))
    return assemble_final_prompt(p, hits, kb)
