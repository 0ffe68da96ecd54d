"""Corpus data model, ingestion, validation, and task truncation.

The on-disk format is one JSON object per line (schema id "jsonl-v1",
JSON Schema in ehrrag/data/corpus_schema.json). The only structured
fields the harness ever reads from a note are its timestamp and type;
everything else a task needs comes from the gold attachments.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from pathlib import Path

from .errors import NoCutoffNote, UnreadableFile

logger = logging.getLogger(__name__)

# Notes filed shortly after discharge (typically the discharge summary
# itself) are tolerated up to this slack.
_DISCHARGE_SLACK = timedelta(days=1)

# author_service labels treated as the infectious-diseases service when
# truncating for the antibiotics task.
DEFAULT_ID_SERVICES = ("infectious diseases", "id", "infectious disease")


class NoteType(str, enum.Enum):
    PROGRESS = "progress"
    CONSULT = "consult"
    IMAGING_REPORT = "imaging_report"
    HANDOFF = "handoff"
    DISCHARGE_SUMMARY = "discharge_summary"
    ID_CONSULT = "id_consult"
    OTHER = "other"


class TaskKind(str, enum.Enum):
    IMAGING = "imaging"
    ANTIBIOTICS = "antibiotics"
    DIAGNOSIS = "diagnosis"


@dataclass(frozen=True)
class ClinicalNote:
    note_id: str
    timestamp: datetime
    note_type: NoteType
    note_type_raw: str  # label as written in the source record
    author_service: str | None
    text: str


@dataclass(frozen=True)
class ProcedureRow:
    """One tabular procedure record attached as imaging gold."""

    description: str
    timestamp: datetime


@dataclass(frozen=True)
class GoldAttachments:
    procedures: tuple[ProcedureRow, ...] = ()
    billing_codes: tuple[str, ...] = ()
    id_consult_note_id: str | None = None
    discharge_summary_note_id: str | None = None


@dataclass(frozen=True)
class Hospitalization:
    encounter_id: str
    admit_time: datetime
    discharge_time: datetime
    notes: tuple[ClinicalNote, ...]
    gold: GoldAttachments = field(default_factory=GoldAttachments)

    def note_by_id(self, note_id: str) -> ClinicalNote | None:
        for note in self.notes:
            if note.note_id == note_id:
                return note
        return None


@dataclass(frozen=True)
class TruncatedHospitalization(Hospitalization):
    """A hospitalization restricted to notes before the task cutoff."""

    task: TaskKind = TaskKind.IMAGING
    cutoff_time: datetime = datetime.min
    cutoff_note_id: str = ""


@dataclass(frozen=True)
class Corpus:
    hospitalizations: tuple[Hospitalization, ...]

    def __len__(self) -> int:
        return len(self.hospitalizations)

    def __iter__(self):
        return iter(self.hospitalizations)

    def get(self, encounter_id: str) -> Hospitalization | None:
        for h in self.hospitalizations:
            if h.encounter_id == encounter_id:
                return h
        return None


@dataclass(frozen=True)
class LoadIssue:
    kind: str  # MissingField, BadTimestamp, DuplicateEncounter, ...
    encounter_id: str | None
    note_id: str | None
    message: str


@dataclass
class LoadReport:
    issues: list[LoadIssue] = field(default_factory=list)
    n_encounters: int = 0
    n_notes: int = 0

    def add(self, kind: str, message: str, encounter_id: str | None = None,
            note_id: str | None = None) -> None:
        self.issues.append(LoadIssue(kind, encounter_id, note_id, message))

    def kinds(self) -> list[str]:
        return [i.kind for i in self.issues]

    @property
    def ok(self) -> bool:
        return not self.issues


def parse_timestamp(value: str) -> datetime:
    """RFC 3339 timestamp to a naive datetime (UTC offsets folded in)."""
    ts = datetime.fromisoformat(value.replace("Z", "+00:00"))
    if ts.tzinfo is not None:
        ts = (ts - ts.utcoffset()).replace(tzinfo=None)
    return ts


def format_timestamp(ts: datetime) -> str:
    return ts.isoformat(sep="T", timespec="seconds")


def _parse_note(raw: dict, encounter_id: str, report: LoadReport) -> ClinicalNote | None:
    note_id = raw.get("note_id")
    if not note_id:
        report.add("MissingField", "note missing note_id", encounter_id)
        return None
    if not raw.get("timestamp"):
        report.add("BadTimestamp", "note missing timestamp", encounter_id, note_id)
        return None
    try:
        ts = parse_timestamp(raw["timestamp"])
    except (ValueError, TypeError) as exc:
        report.add("BadTimestamp", f"unparseable timestamp: {exc}", encounter_id, note_id)
        return None
    text = raw.get("text")
    if not text:
        report.add("MissingField", "note text empty or missing", encounter_id, note_id)
        return None
    raw_type = str(raw.get("note_type", "")).strip()
    try:
        note_type = NoteType(raw_type)
    except ValueError:
        note_type = NoteType.OTHER
        report.add("UnknownNoteType",
                   f"note_type {raw_type!r} mapped to 'other'", encounter_id, note_id)
    return ClinicalNote(
        note_id=str(note_id),
        timestamp=ts,
        note_type=note_type,
        note_type_raw=raw_type,
        author_service=raw.get("author_service"),
        text=text,
    )


def _parse_gold(raw: dict, encounter_id: str, report: LoadReport) -> GoldAttachments:
    procedures = []
    for row in raw.get("procedures", []):
        try:
            procedures.append(ProcedureRow(str(row["description"]),
                                           parse_timestamp(row["timestamp"])))
        except (KeyError, ValueError, TypeError) as exc:
            report.add("BadRecord", f"bad procedure row: {exc}", encounter_id)
    return GoldAttachments(
        procedures=tuple(procedures),
        billing_codes=tuple(str(c) for c in raw.get("billing_codes", [])),
        id_consult_note_id=raw.get("id_consult_note_id"),
        discharge_summary_note_id=raw.get("discharge_summary_note_id"),
    )


def _parse_record(raw: dict, report: LoadReport) -> Hospitalization | None:
    encounter_id = raw.get("encounter_id")
    if not encounter_id:
        report.add("MissingField", "record missing encounter_id")
        return None
    encounter_id = str(encounter_id)
    try:
        admit = parse_timestamp(raw["admit_time"])
        discharge = parse_timestamp(raw["discharge_time"])
    except (KeyError, ValueError, TypeError) as exc:
        report.add("BadTimestamp", f"bad encounter window: {exc}", encounter_id)
        return None
    notes = []
    for raw_note in raw.get("notes", []):
        note = _parse_note(raw_note, encounter_id, report)
        if note is None:
            continue
        if not admit <= note.timestamp <= discharge + _DISCHARGE_SLACK:
            report.add("TimestampOutOfRange",
                       f"note at {format_timestamp(note.timestamp)} outside "
                       f"[admit, discharge + 1 day]", encounter_id, note.note_id)
            continue
        notes.append(note)
    notes.sort(key=lambda n: (n.timestamp, n.note_id))
    gold = _parse_gold(raw.get("gold", {}), encounter_id, report)
    return Hospitalization(encounter_id, admit, discharge, tuple(notes), gold)


def load_corpus(path: str | Path, schema: str = "jsonl-v1") -> tuple[Corpus, LoadReport]:
    """Load and validate a line-delimited corpus file.

    Per-record violations are collected into the returned LoadReport and
    the offending record or note is skipped; only unreadable framing is
    fatal.
    """
    if schema != "jsonl-v1":
        raise ValueError(f"unknown corpus schema {schema!r}")
    path = Path(path)
    try:
        raw_text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise UnreadableFile(f"cannot read corpus file {path}: {exc}") from exc

    report = LoadReport()
    hospitalizations: list[Hospitalization] = []
    seen: set[str] = set()
    for lineno, line in enumerate(raw_text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            report.add("BadRecord", f"line {lineno}: invalid JSON: {exc}")
            continue
        h = _parse_record(raw, report)
        if h is None:
            continue
        if h.encounter_id in seen:
            report.add("DuplicateEncounter",
                       f"line {lineno}: duplicate encounter", h.encounter_id)
            continue
        seen.add(h.encounter_id)
        hospitalizations.append(h)
        report.n_notes += len(h.notes)
    report.n_encounters = len(hospitalizations)
    return Corpus(tuple(hospitalizations)), report


def _note_to_json(note: ClinicalNote) -> dict:
    return {
        "note_id": note.note_id,
        "timestamp": format_timestamp(note.timestamp),
        "note_type": note.note_type_raw or note.note_type.value,
        "author_service": note.author_service,
        "text": note.text,
    }


def record_to_json(h: Hospitalization) -> str:
    """Canonical single-line serialization; synth emits the same bytes."""
    record = {
        "encounter_id": h.encounter_id,
        "admit_time": format_timestamp(h.admit_time),
        "discharge_time": format_timestamp(h.discharge_time),
        "notes": [_note_to_json(n) for n in h.notes],
        "gold": {
            "procedures": [
                {"description": p.description, "timestamp": format_timestamp(p.timestamp)}
                for p in h.gold.procedures
            ],
            "billing_codes": list(h.gold.billing_codes),
            "id_consult_note_id": h.gold.id_consult_note_id,
            "discharge_summary_note_id": h.gold.discharge_summary_note_id,
        },
    }
    return json.dumps(record, ensure_ascii=False, separators=(",", ":"))


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for h in corpus:
            fh.write(record_to_json(h))
            fh.write("\n")


def _anchor_type(task: TaskKind) -> NoteType:
    return NoteType.ID_CONSULT if task is TaskKind.ANTIBIOTICS else NoteType.DISCHARGE_SUMMARY


def truncate_for_task(
    h: Hospitalization,
    task: TaskKind,
    id_services: tuple[str, ...] = DEFAULT_ID_SERVICES,
) -> TruncatedHospitalization:
    """Restrict notes to those strictly earlier than the task's anchor note.

    The anchor is the earliest discharge summary (imaging, diagnosis) or
    the earliest ID consult (antibiotics); notes timestamped at or after
    it are dropped. For antibiotics every note authored by the
    infectious-diseases service is dropped as well. Idempotent: a
    hospitalization already truncated for the same task passes through.
    """
    if isinstance(h, TruncatedHospitalization):
        if h.task is task:
            return h
        raise NoCutoffNote(
            f"{h.encounter_id}: already truncated for {h.task.value}, "
            f"cannot re-truncate for {task.value}")
    anchor_type = _anchor_type(task)
    anchors = [n for n in h.notes if n.note_type is anchor_type]
    if not anchors:
        raise NoCutoffNote(f"{h.encounter_id}: no {anchor_type.value} note")
    cutoff = anchors[0]  # earliest, guards against addenda leakage
    kept = [n for n in h.notes if n.timestamp < cutoff.timestamp]
    if task is TaskKind.ANTIBIOTICS:
        labels = {s.lower() for s in id_services}
        kept = [n for n in kept
                if (n.author_service or "").lower() not in labels
                and n.note_type is not NoteType.ID_CONSULT]
    return TruncatedHospitalization(
        encounter_id=h.encounter_id,
        admit_time=h.admit_time,
        discharge_time=h.discharge_time,
        notes=tuple(kept),
        gold=h.gold,
        task=task,
        cutoff_time=cutoff.timestamp,
        cutoff_note_id=cutoff.note_id,
    )


def copy_with_notes(h: Hospitalization, notes: tuple[ClinicalNote, ...]) -> Hospitalization:
    return replace(h, notes=notes)
