"""Imaging procedures task: gold construction, output parsing, scoring.

Gold events come from tabular procedure descriptions mapped with a
keyword/regex table; predictions come from the model's bulleted output.
Anatomical locations are compared as written, lowercased and trimmed,
with no normalization beyond that: under the strictest level "spine"
does not match "lumbar spine".
"""

from __future__ import annotations

import csv
import enum
import re
from dataclasses import dataclass, field
from datetime import date, datetime
from importlib import resources
from pathlib import Path

from ..corpus import ProcedureRow
from .dates import resolve_relative_date
from .matching import PrfScore, match_counts, micro_prf
from ..errors import ImpossibleDate


class Modality(str, enum.Enum):
    MRI = "MRI"
    CT = "CT"
    ULTRASOUND = "Ultrasound"
    XRAY = "X-ray"
    NM = "NM"


class StrictnessLevel(str, enum.Enum):
    MOD_DATE_LOC = "mod_date_loc"
    MOD_DATE = "mod_date"
    MOD_DATE_PM1 = "mod_date_pm1"


@dataclass(frozen=True)
class ImagingEvent:
    modality: Modality
    date: date | None  # None means the date is unknown
    location: str  # lowercased, trimmed
    subtype: str | None = None


@dataclass(frozen=True)
class ModalityRule:
    pattern: re.Pattern
    modality: Modality
    strip_tokens: re.Pattern | None


# Qualifiers removed from every description when forming the location.
# Laterality markers (LEFT, RIGHT, BILATERAL) are deliberately kept.
_QUALIFIER_PATTERNS = [
    r"\b\d+\s+VIEWS?\b",
    r"\bW\s*(&|AND)\s*W/O\s+(IV\s+)?CONTRAST\b",
    r"\bW/?O\s+(IV\s+)?CONTRAST\b",
    r"\bW/?\s+(IV\s+)?CONTRAST\b",
    r"\bWITH(OUT)?\s+(IV\s+)?CONTRAST\b",
    r"\bPA\s*(&|AND)\s*LAT(ERAL)?\b",
    r"\bPORTABLE\b",
    r"\bSTAT\b",
]
_QUALIFIER_RE = re.compile("|".join(_QUALIFIER_PATTERNS), re.IGNORECASE)


def load_modality_rules(path: str | Path | None = None) -> list[ModalityRule]:
    """Rules from a (pattern, modality, strip_tokens) CSV; first match wins."""
    if path is None:
        text = resources.files("ehrrag").joinpath("data", "modality_rules.csv") \
            .read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    rules = []
    for row in csv.DictReader(text.splitlines()):
        strip = row.get("strip_tokens", "").strip()
        rules.append(ModalityRule(
            pattern=re.compile(row["pattern"], re.IGNORECASE),
            modality=Modality(row["modality"]),
            strip_tokens=re.compile(strip, re.IGNORECASE) if strip else None,
        ))
    return rules


def normalize_location(text: str) -> str:
    return re.sub(r"\s+", " ", text).strip().lower()


@dataclass
class ImagingGoldReport:
    non_imaging: list[str] = field(default_factory=list)


def gold_from_procedures(
    rows: list[ProcedureRow],
    rules: list[ModalityRule] | None = None,
) -> tuple[list[ImagingEvent], ImagingGoldReport]:
    """Map tabular procedure descriptions to imaging events.

    The first matching modality rule claims the row; modality keywords,
    rule-specific strip tokens, and standard qualifiers are removed from
    the description to leave the anatomical location. Rows matching no
    rule are reported, not fatal.
    """
    rules = rules if rules is not None else load_modality_rules()
    events: list[ImagingEvent] = []
    report = ImagingGoldReport()
    for row in rows:
        desc = row.description.upper()
        rule = next((r for r in rules if r.pattern.search(desc)), None)
        if rule is None:
            report.non_imaging.append(row.description)
            continue
        location = rule.pattern.sub(" ", desc)
        if rule.strip_tokens is not None:
            location = rule.strip_tokens.sub(" ", location)
        location = _QUALIFIER_RE.sub(" ", location)
        events.append(ImagingEvent(
            modality=rule.modality,
            date=row.timestamp.date(),
            location=normalize_location(location),
        ))
    return events, report


@dataclass
class ImagingParseReport:
    malformed: list[str] = field(default_factory=list)
    unknown_modality: list[str] = field(default_factory=list)
    out_of_window_dates: list[str] = field(default_factory=list)


# Modality may itself contain a hyphen (X-ray), so the subtype separator
# must be a spaced " - ".
_BULLET_RE = re.compile(
    r"^\s*-\s*\(\s*(?P<date>unknown|\d{1,2}\s*/\s*\d{1,2})\s*\)\s*"
    r"(?P<modality>.+?)(?:\s+-\s+(?P<subtype>[^:]*?))?\s*:\s*(?P<location>.+?)\s*$",
    re.IGNORECASE,
)

NO_IMAGING_SENTINEL = "No imaging procedures identified."


def parse_llm_imaging(
    text: str,
    window_start: date,
    window_end: date,
    rules: list[ModalityRule] | None = None,
) -> tuple[list[ImagingEvent], ImagingParseReport]:
    """Parse "- (MM/DD) Modality - Subtype: Location" bullets.

    "unknown" dates become None; MM/DD is resolved inside the encounter
    window. Malformed lines are reported and skipped; the no-imaging
    sentinel yields an empty list.
    """
    rules = rules if rules is not None else load_modality_rules()
    report = ImagingParseReport()
    events: list[ImagingEvent] = []
    if text.strip() == NO_IMAGING_SENTINEL:
        return events, report
    for line in text.splitlines():
        stripped = line.strip()
        if not stripped or stripped == NO_IMAGING_SENTINEL:
            continue
        m = _BULLET_RE.match(line)
        if not m:
            report.malformed.append(line)
            continue
        mod_text = m.group("modality").strip().upper()
        rule = next((r for r in rules if r.pattern.search(mod_text)), None)
        if rule is None:
            report.unknown_modality.append(line)
            continue
        date_text = m.group("date").lower().replace(" ", "")
        if date_text == "unknown":
            event_date = None
        else:
            month, day = (int(x) for x in date_text.split("/"))
            try:
                resolved = resolve_relative_date(month, day, window_start, window_end)
            except ImpossibleDate:
                report.malformed.append(line)
                continue
            if resolved.out_of_window:
                report.out_of_window_dates.append(line)
            event_date = resolved.value
        subtype = (m.group("subtype") or "").strip()
        subtype_norm = None if subtype.lower() in ("", "none") else subtype.lower()
        events.append(ImagingEvent(
            modality=rule.modality,
            date=event_date,
            location=normalize_location(m.group("location")),
            subtype=subtype_norm,
        ))
    return events, report


def _compatible(level: StrictnessLevel):
    def predicate(p: ImagingEvent, g: ImagingEvent) -> bool:
        if p.modality is not g.modality:
            return False
        if p.date is None or g.date is None:
            return False  # unknown dates never match
        if level is StrictnessLevel.MOD_DATE_PM1:
            if abs((p.date - g.date).days) > 1:
                return False
        elif p.date != g.date:
            return False
        if level is StrictnessLevel.MOD_DATE_LOC and p.location != g.location:
            return False
        return True

    return predicate


def match_imaging(
    pred: list[ImagingEvent],
    gold: list[ImagingEvent],
    level: StrictnessLevel,
) -> tuple[int, int, int]:
    """(tp, fp, fn) under maximum one-to-one matching at the given level.

    Subtype is ignored at every level; duplicate predictions beyond gold
    multiplicity fall out as false positives.
    """
    return match_counts(pred, gold, _compatible(level))


def score_imaging(counts: list[tuple[int, int, int]]) -> PrfScore:
    """Micro-aggregate per-encounter (tp, fp, fn) into dataset P/R/F1."""
    tp = sum(c[0] for c in counts)
    fp = sum(c[1] for c in counts)
    fn = sum(c[2] for c in counts)
    return micro_prf(tp, fp, fn)


def format_imaging_answer(events: list[tuple[datetime | date | None, Modality, str | None, str]]) -> str:
    """Render events in the task's output grammar (used by the oracle)."""
    if not events:
        return NO_IMAGING_SENTINEL
    lines = []
    for when, modality, subtype, location in events:
        date_text = "unknown" if when is None else f"{when.month:02d}/{when.day:02d}"
        lines.append(f"- ({date_text}) {modality.value} - {subtype or 'None'}: {location}")
    return "\n".join(lines)
