"""Map-reduce summarization of an analysis result into a short warning.

The map step turns each nonempty section of the result into an
intermediate summary; the reduce step renders the user-facing sentences
from fixed templates in a fixed section order.
"""

from __future__ import annotations

from dataclasses import dataclass

from .models import EXCESSIVE, UNCONSENTED, UNDECLARED, WarningReport, utcnow

MAX_SENTENCE = 280

LAY_PHRASES = {
    "Call logs": "your call history",
    "Web browsing": "your browsing activity",
    "App activity": "app usage details",
    "App info and performance": "app performance details",
    "Messages": "messages",
    "Personal info": "personal information",
    "Financial info": "financial information",
    "Health and fitness": "health data",
    "Location": "your precise location",
    "Photos and videos": "your photos and videos",
    "Audio": "audio recordings",
    "Files and docs": "your files and documents",
    "Contacts": "your contacts",
    "Calendar": "your calendar",
    "Device or other IDs": "your device identifiers",
}

# adjectival form, followed by the word "data" in the over-collection sentence
SHORT_PHRASES = {
    "Call logs": "call log",
    "Web browsing": "web browsing",
    "App activity": "app activity",
    "App info and performance": "app performance",
    "Messages": "message",
    "Personal info": "personal",
    "Financial info": "financial",
    "Health and fitness": "health",
    "Location": "location",
    "Photos and videos": "photo and video",
    "Audio": "audio",
    "Files and docs": "file and document",
    "Contacts": "contact",
    "Calendar": "calendar",
    "Device or other IDs": "device identifier",
}

_LEADING = ("Web browsing", "App activity", "App info and performance", "Messages", "Personal info",
            "Financial info", "Health and fitness")
DECLARED_ORDER = _LEADING + tuple(sorted(set(LAY_PHRASES) - set(_LEADING)))

CASE1_TEMPLATE = ("The app can collect {items}, but the app developer does not mention it in the privacy "
                  "information shown on the app store.")
CASE2_TEMPLATE = ("The app states that it collects data such as {items}, even though it has not received your "
                  "consent to access this information on your device.")
EXCESSIVE_TEMPLATE = "The app may over-collect because {items} data may not relate to its {app_category} features."
ALL_CLEAR = ("No privacy inconsistencies were detected: every permission you granted matches the developer's "
             "declared data practices.")

SECTION_ORDER = ("matched", UNDECLARED, UNCONSENTED, EXCESSIVE)


def lay_phrase(category):
    return LAY_PHRASES.get(category, category.lower())


def short_phrase(category):
    return SHORT_PHRASES.get(category, category.lower())


def _declared_key(category):
    try:
        return (0, DECLARED_ORDER.index(category), category)
    except ValueError:
        return (1, 0, category)


def join_serial(items):
    items = list(items)
    if len(items) <= 1:
        return "".join(items)
    if len(items) == 2:
        return f"{items[0]} and {items[1]}"
    return ", ".join(items[:-1]) + ", and " + items[-1]


def _render(template, phrases, **kw):
    """Fill ``template``, splitting the list over several sentences if one would be too long."""
    out, chunk = [], []
    for phrase in phrases:
        trial = template.format(items=join_serial(chunk + [phrase]), **kw)
        if chunk and len(trial) > MAX_SENTENCE:
            out.append(template.format(items=join_serial(chunk), **kw))
            chunk = [phrase]
        else:
            chunk.append(phrase)
    if chunk:
        out.append(template.format(items=join_serial(chunk), **kw))
    return out


@dataclass(frozen=True)
class SectionSummary:
    tag: str
    text: str
    categories: tuple


def map_sections(result) -> list[SectionSummary]:
    out = []
    if result.matched:
        cats = sorted({c for _, c in result.matched})
        out.append(SectionSummary(
            "matched", "Granted permissions that match the declaration cover " +
            join_serial(lay_phrase(c) for c in cats) + ".", tuple(cats)))
    case1 = sorted({c for f in result.findings_of(UNDECLARED) for c in f.categories})
    if case1:
        out.append(SectionSummary(
            UNDECLARED, "Undeclared access to " + join_serial(lay_phrase(c) for c in case1) + ".", tuple(case1)))
    case2 = sorted({c for f in result.findings_of(UNCONSENTED) for c in f.categories}, key=_declared_key)
    if case2:
        out.append(SectionSummary(
            UNCONSENTED, "Declared without consent: " + join_serial(lay_phrase(c) for c in case2) + ".",
            tuple(case2)))
    excessive = sorted({c for f in result.findings_of(EXCESSIVE) for c in f.categories}, key=_declared_key)
    if excessive:
        out.append(SectionSummary(
            EXCESSIVE, f"Possibly unrelated to a {result.app_category} app: " +
            join_serial(short_phrase(c) for c in excessive) + " data.", tuple(excessive)))
    return out


def reduce_sections(intermediates, *, package_name, verdict, app_category, diagnostics=(), generated_at=None):
    by_tag = {s.tag: s for s in intermediates}
    sentences = []
    if UNDECLARED in by_tag:
        sentences += _render(CASE1_TEMPLATE, [lay_phrase(c) for c in by_tag[UNDECLARED].categories])
    if UNCONSENTED in by_tag:
        sentences += _render(CASE2_TEMPLATE, [lay_phrase(c) for c in by_tag[UNCONSENTED].categories])
    if EXCESSIVE in by_tag:
        sentences += _render(EXCESSIVE_TEMPLATE, [short_phrase(c) for c in by_tag[EXCESSIVE].categories],
                             app_category=app_category)
    if verdict == "Consistent":
        sentences.append(ALL_CLEAR)
    return WarningReport(package_name, sentences, verdict, generated_at or utcnow(), diagnostics)


def summarize(result, generated_at=None) -> WarningReport:
    return reduce_sections(map_sections(result), package_name=result.package_name, verdict=result.verdict,
                           app_category=result.app_category, diagnostics=result.diagnostics,
                           generated_at=generated_at)


class TemplateSummarizer:
    def summarize(self, result, generated_at=None):
        return summarize(result, generated_at)


class GenerativeSummarizer:
    """Asks a text-generation client to merge the intermediate summaries.

    Falls back to the templates when the reply is empty or a sentence is
    longer than the pop-up limit.
    """

    def __init__(self, client, timeout=60.0):
        self.client = client
        self.timeout = timeout

    def summarize(self, result, generated_at=None):
        sections = map_sections(result)
        prompt = ("Rewrite these findings about an Android app as at most three short warnings for a "
                  "non-technical user, one per line:\n" + "\n".join(f"- {s.text}" for s in sections
                                                                    if s.tag != "matched"))
        try:
            raw = self.client.generate(prompt, timeout=self.timeout)
        except Exception:
            return summarize(result, generated_at)
        lines = [ln.strip(" -") for ln in str(raw).splitlines() if ln.strip(" -")]
        if not lines or any(len(ln) > MAX_SENTENCE for ln in lines):
            return summarize(result, generated_at)
        return WarningReport(result.package_name, lines, result.verdict, generated_at or utcnow(),
                             result.diagnostics)
