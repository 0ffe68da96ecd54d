"""Antibiotic timelines task.

Gold comes from the "History of Anti-Infectives" section of the ID
consult note; predictions from the model's bulleted timeline; the
structured baseline from the medication administration record. All
medications are keyed by their normalized ingredient set, so a brand
name in one place matches its generics elsewhere, and combination
products compare by full set equality.

Intervals are day-granular and inclusive on both ends, matching the
"1/16-present" precision of the gold annotations.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from datetime import date, datetime
from pathlib import Path

from ..corpus import ClinicalNote
from ..errors import ImpossibleDate, SectionNotFound
from ..rxnorm import MedicationNormalizer
from .dates import resolve_relative_date
from .matching import PrfScore, micro_prf

DateSpan = tuple[date, date]

DEFAULT_SECTION_PATTERNS = (r"history of anti-?infectives?",)
ANTI_INFECTIVE_CLASSES = ("anti-infective", "anti-infectives", "antiinfective")


@dataclass(frozen=True)
class AntibioticCourse:
    raw_name: str
    ingredients: frozenset[str]
    span: DateSpan | None  # None means the dates are unclear
    resolved_name: bool = True  # normalization succeeded
    flagged_date: bool = False  # a date resolved outside the window


@dataclass(frozen=True)
class MarRecord:
    medication: str
    therapeutic_class: str
    admin_timestamps: tuple[datetime, ...]


@dataclass
class AbxParseReport:
    failures: list[str] = field(default_factory=list)


_GOLD_LINE_RE = re.compile(
    r"^\s*(?P<name>[A-Za-z][A-Za-z0-9 /\-]*?)\s*:\s*"
    r"(?P<start>\d{1,2}/\d{1,2})\s*-\s*(?P<end>\d{1,2}/\d{1,2}|present)\s*$",
    re.IGNORECASE,
)


def _resolve(md: str, window: tuple[date, date], fallback: date | None) -> tuple[date, bool]:
    if md.lower() in ("present", "ongoing"):
        return fallback, False
    month, day = (int(x) for x in md.split("/"))
    resolved = resolve_relative_date(month, day, window[0], window[1])
    return resolved.value, resolved.out_of_window


def gold_from_consult(
    note: ClinicalNote,
    consult_date: date,
    window: tuple[date, date],
    normalizer: MedicationNormalizer,
    section_patterns: tuple[str, ...] = DEFAULT_SECTION_PATTERNS,
) -> tuple[list[AntibioticCourse], AbxParseReport]:
    """Extract "Name: M/D-M/D" lines from the anti-infectives section.

    "present" resolves to the consult date. The section runs from its
    header to the next blank line; lines inside it that fail to parse
    are reported, not fatal.
    """
    header_re = re.compile("|".join(section_patterns), re.IGNORECASE)
    lines = note.text.splitlines()
    start = next((i for i, line in enumerate(lines) if header_re.search(line)), None)
    if start is None:
        raise SectionNotFound(
            f"note {note.note_id}: no section matching {section_patterns}")
    report = AbxParseReport()
    courses: list[AntibioticCourse] = []
    for line in lines[start + 1:]:
        if not line.strip():
            break
        m = _GOLD_LINE_RE.match(line)
        if not m:
            report.failures.append(line)
            continue
        try:
            start_date, flag_a = _resolve(m.group("start"), window, None)
            end_date, flag_b = _resolve(m.group("end"), window, consult_date)
        except ImpossibleDate:
            report.failures.append(line)
            continue
        if start_date > end_date:
            report.failures.append(line)
            continue
        norm = normalizer.normalize(m.group("name"))
        courses.append(AntibioticCourse(
            raw_name=m.group("name").strip(),
            ingredients=norm.ingredients,
            span=(start_date, end_date),
            resolved_name=norm.resolved,
            flagged_date=flag_a or flag_b,
        ))
    return courses, report


_PRED_LINE_RE = re.compile(r"^\s*-\s*(?P<name>.+?)\s*\(\s*(?P<body>[^()]*)\)\s*$")
_PRED_SPAN_RE = re.compile(
    r"^(?P<start>\d{1,2}/\d{1,2})\s*-\s*(?P<end>\d{1,2}/\d{1,2}|present|ongoing)$",
    re.IGNORECASE,
)


def parse_llm_abx(
    text: str,
    consult_date: date,
    window: tuple[date, date],
    normalizer: MedicationNormalizer,
) -> tuple[list[AntibioticCourse], AbxParseReport]:
    """Parse "- Name (MM/DD-MM/DD)" bullets from model output.

    Accepts "present" or "ongoing" for an open end (resolved to the
    consult date) and "(dates unclear)" for an unresolvable span.
    """
    report = AbxParseReport()
    courses: list[AntibioticCourse] = []
    for line in text.splitlines():
        if not line.strip():
            continue
        m = _PRED_LINE_RE.match(line)
        if not m:
            report.failures.append(line)
            continue
        body = m.group("body").strip()
        norm = normalizer.normalize(m.group("name"))
        if body.lower() == "dates unclear":
            courses.append(AntibioticCourse(
                raw_name=m.group("name").strip(), ingredients=norm.ingredients,
                span=None, resolved_name=norm.resolved))
            continue
        span_match = _PRED_SPAN_RE.match(body)
        if not span_match:
            report.failures.append(line)
            continue
        try:
            start_date, flag_a = _resolve(span_match.group("start"), window, None)
            end_date, flag_b = _resolve(span_match.group("end"), window, consult_date)
        except ImpossibleDate:
            report.failures.append(line)
            continue
        if start_date > end_date:
            start_date, end_date = end_date, start_date
        courses.append(AntibioticCourse(
            raw_name=m.group("name").strip(), ingredients=norm.ingredients,
            span=(start_date, end_date), resolved_name=norm.resolved,
            flagged_date=flag_a or flag_b))
    return courses, report


def day_set(span: DateSpan) -> set[date]:
    days = set()
    current = span[0]
    while current <= span[1]:
        days.add(current)
        current = date.fromordinal(current.toordinal() + 1)
    return days


def _merge_by_key(courses: list[AntibioticCourse]) -> dict[frozenset[str], set[date]]:
    """Union day sets of courses sharing one ingredient key; unclear adds none."""
    merged: dict[frozenset[str], set[date]] = {}
    for course in courses:
        days = merged.setdefault(course.ingredients, set())
        if course.span is not None:
            days |= day_set(course.span)
    return merged


@dataclass(frozen=True)
class AbxEncounterScore:
    tp: int
    fp: int
    fn: int
    jaccards: tuple[float, ...]  # one per key in the union of both sides


def score_abx_encounter(
    pred: list[AntibioticCourse],
    gold: list[AntibioticCourse],
) -> AbxEncounterScore:
    """Name hits and per-medication timespan Jaccard for one encounter.

    A key present on only one side scores 0, as does a key whose span
    never resolved; exact day-set agreement scores 1.
    """
    pred_days = _merge_by_key(pred)
    gold_days = _merge_by_key(gold)
    tp = len(pred_days.keys() & gold_days.keys())
    jaccards = []
    for key in sorted(pred_days.keys() | gold_days.keys(), key=sorted):
        p, g = pred_days.get(key), gold_days.get(key)
        if p is None or g is None or not p or not g:
            jaccards.append(0.0)
        else:
            jaccards.append(len(p & g) / len(p | g))
    return AbxEncounterScore(tp=tp, fp=len(pred_days) - tp, fn=len(gold_days) - tp,
                             jaccards=tuple(jaccards))


@dataclass(frozen=True)
class AbxScore:
    names: PrfScore
    jaccard_by_encounter: float  # mean of per-encounter means (canonical)
    jaccard_pooled: float  # mean over all (encounter, medication) pairs
    n_encounters_scored: int


def aggregate_abx(scores: list[AbxEncounterScore]) -> AbxScore:
    tp = sum(s.tp for s in scores)
    fp = sum(s.fp for s in scores)
    fn = sum(s.fn for s in scores)
    per_encounter = [sum(s.jaccards) / len(s.jaccards) for s in scores if s.jaccards]
    pooled = [j for s in scores for j in s.jaccards]
    return AbxScore(
        names=micro_prf(tp, fp, fn),
        jaccard_by_encounter=sum(per_encounter) / len(per_encounter) if per_encounter else 0.0,
        jaccard_pooled=sum(pooled) / len(pooled) if pooled else 0.0,
        n_encounters_scored=len(per_encounter),
    )


def mar_baseline(
    records: list[MarRecord],
    cutoff: datetime,
    normalizer: MedicationNormalizer,
    classes: tuple[str, ...] = ANTI_INFECTIVE_CLASSES,
) -> list[AntibioticCourse]:
    """Rule-based timeline from the medication administration record.

    Keeps anti-infective-class medications only, groups them by
    normalized ingredient set, and spans first to last administration
    at or before the cutoff.
    """
    class_set = {c.lower() for c in classes}
    by_key: dict[frozenset[str], tuple[str, list[date]]] = {}
    for record in records:
        if record.therapeutic_class.strip().lower() not in class_set:
            continue
        dates = sorted(ts.date() for ts in record.admin_timestamps if ts <= cutoff)
        if not dates:
            continue
        norm = normalizer.normalize(record.medication)
        entry = by_key.setdefault(norm.ingredients, (record.medication, []))
        entry[1].extend(dates)
    courses = []
    for key, (name, dates) in sorted(by_key.items(), key=lambda kv: sorted(kv[0])):
        courses.append(AntibioticCourse(
            raw_name=name, ingredients=key, span=(min(dates), max(dates))))
    return courses


def load_mar_csv(path: str | Path) -> dict[str, list[MarRecord]]:
    """MAR rows (encounter_id, medication, class, admin_timestamp) by encounter.

    One row per administration; rows for the same encounter and
    medication merge into one record.
    """
    from ..corpus import parse_timestamp

    grouped: dict[str, dict[tuple[str, str], list[datetime]]] = {}
    with Path(path).open(encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            key = (row["medication"], row["class"])
            grouped.setdefault(row["encounter_id"], {}).setdefault(key, []).append(
                parse_timestamp(row["admin_timestamp"]))
    return {
        encounter: [
            MarRecord(med, cls, tuple(sorted(stamps)))
            for (med, cls), stamps in sorted(meds.items())
        ]
        for encounter, meds in grouped.items()
    }


def format_abx_answer(courses: list[tuple[str, str, str]]) -> str:
    """Render (name, start MM/DD, end MM/DD or "present") bullets (oracle side)."""
    if not courses:
        return ""
    lines = []
    for name, start, end in courses:
        if start is None and end is None:
            lines.append(f"- {name} (dates unclear)")
        else:
            lines.append(f"- {name} ({start}-{end})")
    return "\n".join(lines)
