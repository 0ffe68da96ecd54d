"""Seeded synthetic hospitalizations with fully known planted truth.

Every gold fact (imaging event, antibiotic course, key diagnosis) is
injected verbatim into at least one note before the task cutoff, with
controlled surface variation (brand vs generic names, "CXR" vs "chest
x-ray") so the normalization paths get exercised. Facts are spread
uniformly across the stay, which makes recency truncation provably lose
early facts. Prophylactic antibiotic decoys appear in the MAR but never
in the consult's gold section.

The oracle responder answers task prompts strictly from planted facts
whose source sentences appear inside the prompt's passage block: an
honest reader of exactly the provided context. The text is deliberately
non-clinical boilerplate; nothing here resembles a real patient.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from pathlib import Path

from .corpus import (ClinicalNote, Corpus, GoldAttachments, Hospitalization,
                     NoteType, ProcedureRow, format_timestamp, parse_timestamp,
                     record_to_json)
from .errors import EhrRagError
from .llm import CallableChatProvider, ChatRequest
from .tasks.imaging import Modality
from .tokenization import count_tokens


class ConfigInvalidError(EhrRagError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 42
    n_encounters: int = 50
    stay_days: tuple[int, int] = (8, 14)
    note_tokens: tuple[int, int] = (500, 1200)
    duplication_rate: float = 0.2  # chance a fact is restated later (note bloat)
    distractor_rate: float = 0.3
    imaging_events: tuple[int, int] = (3, 6)
    abx_courses: tuple[int, int] = (2, 4)
    key_diagnoses: tuple[int, int] = (3, 6)

    def validate(self) -> None:
        for rate in (self.duplication_rate, self.distractor_rate):
            if not 0.0 <= rate <= 1.0:
                raise ConfigInvalidError(f"rate {rate} outside [0, 1]")
        for lo, hi in (self.stay_days, self.note_tokens, self.imaging_events,
                       self.abx_courses, self.key_diagnoses):
            if lo < 1 or hi < lo:
                raise ConfigInvalidError(f"empty range ({lo}, {hi})")
        if self.n_encounters < 1:
            raise ConfigInvalidError("n_encounters must be >= 1")


# (procedure description, modality, location after rule mapping,
#  narrative surfaces). The location strings must equal what the
# modality rules extract from the description; test_synth checks this.
IMAGING_POOL = [
    ("X-RAY CHEST 2 VIEWS", Modality.XRAY, "chest",
     ["a chest x-ray (CXR)", "portable chest x-ray", "a two-view chest radiograph"]),
    ("X-RAY ABDOMEN 1 VIEW", Modality.XRAY, "abdomen",
     ["an abdominal x-ray", "a single-view abdominal radiograph"]),
    ("X-RAY LEFT ANKLE 3 VIEWS", Modality.XRAY, "left ankle",
     ["a left ankle x-ray", "left ankle radiographs"]),
    ("CT HEAD W/O CONTRAST", Modality.CT, "head",
     ["a non-contrast head CT", "CT imaging of the head"]),
    ("CT CHEST W CONTRAST", Modality.CT, "chest",
     ["a contrast CT of the chest", "CT chest imaging"]),
    ("CT LUMBAR SPINE W/O IV CONTRAST", Modality.CT, "lumbar spine",
     ["a lumbar spine CT", "CT imaging of the lumbar spine"]),
    ("MRI BRAIN W AND W/O CONTRAST", Modality.MRI, "brain",
     ["a brain MRI", "MR imaging of the brain"]),
    ("MRI RIGHT KNEE W/O CONTRAST", Modality.MRI, "right knee",
     ["a right knee MRI", "MR imaging of the right knee"]),
    ("ULTRASOUND RIGHT UPPER QUADRANT", Modality.ULTRASOUND, "right upper quadrant",
     ["a right upper quadrant ultrasound", "RUQ sonographic imaging"]),
    ("ULTRASOUND KIDNEYS BILATERAL", Modality.ULTRASOUND, "kidneys bilateral",
     ["a bilateral renal ultrasound", "ultrasound imaging of the kidneys"]),
    ("NM BONE SCAN WHOLE BODY", Modality.NM, "whole body",
     ["a whole-body nuclear medicine bone scan", "NM imaging, whole body"]),
]

# (display name, surface variants for notes/consult). All resolve through
# the bundled ingredient fixture.
ABX_POOL = [
    ("Vancomycin", ["vancomycin", "Vancomycin"]),
    ("Ceftriaxone", ["ceftriaxone", "Rocephin"]),
    ("Zosyn", ["Zosyn", "piperacillin-tazobactam"]),
    ("Cefepime", ["cefepime", "Maxipime"]),
    ("Meropenem", ["meropenem", "Merrem"]),
    ("Linezolid", ["linezolid", "Zyvox"]),
    ("Metronidazole", ["metronidazole", "Flagyl"]),
    ("Levofloxacin", ["levofloxacin", "Levaquin"]),
    ("Daptomycin", ["daptomycin", "Cubicin"]),
    ("Azithromycin", ["azithromycin", "Zithromax"]),
]

PROPHYLAXIS_DECOYS = [
    ("Cefazolin", ["cefazolin", "Ancef"]),
    ("Bactrim", ["Bactrim", "sulfamethoxazole-trimethoprim"]),
]

# (canonical surface, ICD-10 code, surface variants). CCSR category sets
# are pairwise distinct across this pool, so one encounter's key
# diagnoses never collide after mapping.
DX_POOL = [
    ("septic shock", "R6521", ["septic shock", "Septic shock"]),
    ("acute kidney injury", "N179", ["acute kidney injury", "AKI"]),
    ("pneumonia", "J189", ["pneumonia", "community acquired pneumonia"]),
    ("acute respiratory failure", "J9600", ["acute respiratory failure"]),
    ("atrial fibrillation", "I4891", ["atrial fibrillation", "afib"]),
    ("gastrointestinal hemorrhage", "K922", ["gastrointestinal hemorrhage", "GI bleed"]),
    ("cellulitis", "L0390", ["cellulitis"]),
    ("NSTEMI", "I214", ["NSTEMI", "non-ST elevation myocardial infarction"]),
    ("delirium", "F05", ["delirium"]),
    ("hyperkalemia", "E875", ["hyperkalemia"]),
    ("heart failure", "I509", ["heart failure", "congestive heart failure"]),
    ("acute ischemic stroke", "I639", ["acute ischemic stroke", "ischemic stroke"]),
    ("COPD exacerbation", "J441", ["COPD exacerbation", "acute exacerbation of COPD"]),
    ("urinary tract infection", "N390", ["urinary tract infection", "UTI"]),
    ("anemia", "D649", ["anemia"]),
]

DX_DECOYS = [
    ("history of smoking", "Z87891"),
    ("obesity", "E669"),
    ("head contusion", "S0990XA"),
    ("hypertension", "I10"),
    ("type 2 diabetes mellitus", "E119"),
]

# Deliberately telegraphic: clinical filler with minimal overlap with the
# retrieval queries, so the test embedding has signal to work with.
FILLER = [
    "Vitals stable overnight.",
    "Afebrile. Hemodynamics within normal limits.",
    "Tolerating oral diet without nausea.",
    "Ambulating with physical therapy assistance.",
    "Pain controlled on current regimen.",
    "Electrolytes repleted per protocol.",
    "Telemetry without events.",
    "Lines reviewed; peripheral IV patent.",
    "Wound edges clean, dry, intact.",
    "Family updated at bedside.",
    "Code status reviewed: full code.",
    "Nursing to monitor intake and output.",
    "Morning labs reviewed; trending appropriately.",
    "Exam unchanged from prior.",
    "Plan discussed with interdisciplinary team.",
    "Social work consulted regarding disposition.",
    "Nutrition following; supplements provided.",
    "Blood glucose monitored; sliding scale adjusted.",
    "Respiratory status stable on room air.",
    "Oxygen weaned as tolerated.",
    "Bowel regimen continued.",
    "Home medication list reconciled.",
    "Case management following placement options.",
    "Overnight events: none reported.",
    "Skin intact; turns every two hours.",
]

DISTRACTORS = [
    "History includes remote CT imaging at an outside facility years ago; "
    "records unavailable.",
    "Received perioperative cefazolin prophylaxis per surgical protocol.",
    "Remote history of appendectomy in childhood.",
    "Prior echocardiogram before admission reportedly unremarkable.",
]

_INDICATIONS = ["bacteremia", "suspected sepsis", "hospital-acquired infection",
                "intra-abdominal infection", "complicated cellulitis"]


def _md(d: date) -> str:
    return f"{d.month:02d}/{d.day:02d}"


def _encounter_seed(seed: int, index: int) -> int:
    digest = hashlib.sha256(f"{seed}:{index}".encode("ascii")).digest()
    return int.from_bytes(digest[:8], "big")


@dataclass
class _NoteDraft:
    note_id: str
    timestamp: datetime
    note_type: NoteType
    author_service: str | None
    sentences: list[str] = field(default_factory=list)


class _EncounterBuilder:
    """Assembles one hospitalization plus its truth record."""

    def __init__(self, cfg: SynthConfig, index: int) -> None:
        self.cfg = cfg
        self.rng = random.Random(_encounter_seed(cfg.seed, index))
        self.eid = f"E{index:04d}"
        self.tag = f"Patient {self.eid}"
        self.stay_days = self.rng.randint(*cfg.stay_days)
        start_offset = self.rng.randrange(0, 280)
        # Admission at 06:00 keeps every generated note (hours >= 6) inside
        # the [admit, discharge] window.
        self.admit = datetime(2024, 1, 15, 6, 0) + timedelta(days=start_offset)
        self.consult_day = max(3, round(self.stay_days * self.rng.uniform(0.6, 0.85)))
        self.consult_time = self._at(self.consult_day, 14, 0)
        self.discharge_day = self.stay_days
        self.ds_time = self._at(self.discharge_day, 11, 0)
        self.discharge_time = self._at(self.discharge_day, 15, 0)
        self.notes: dict[int, _NoteDraft] = {}
        self.truth: dict = {"encounter_id": self.eid, "tag": self.tag,
                            "consult_time": format_timestamp(self.consult_time),
                            "imaging": [], "antibiotics": [], "diagnoses": [],
                            "filtered_codes": []}
        self.procedures: list[ProcedureRow] = []
        self.billing_codes: list[str] = []
        self.mar_rows: list[tuple[str, str, datetime]] = []
        self._seq = 0

    def _at(self, day: int, hour: int, minute: int) -> datetime:
        return self.admit.replace(hour=hour, minute=minute) + timedelta(days=day)

    def _note(self, day: int, hour: int, note_type: NoteType,
              author: str | None) -> _NoteDraft:
        self._seq += 1
        draft = _NoteDraft(
            note_id=f"{self.eid}-N{self._seq:03d}",
            timestamp=self._at(day, hour, self.rng.randrange(0, 60)),
            note_type=note_type, author_service=author)
        self.notes[self._seq] = draft
        return draft

    def _progress_note(self, day: int) -> _NoteDraft:
        for draft in self.notes.values():
            if draft.note_type is NoteType.PROGRESS and draft.author_service == "hospital medicine" \
                    and (draft.timestamp - self.admit).days == day:
                return draft
        note = self._note(day, self.rng.randrange(7, 11), NoteType.PROGRESS,
                          "hospital medicine")
        note.sentences.append(f"{self.tag} hospital day {day}.")
        return note

    def _later_note(self, after_day: int, before_day: int) -> _NoteDraft:
        if after_day >= before_day:
            return self._progress_note(min(after_day, before_day))
        return self._progress_note(self.rng.randint(after_day, before_day))

    def build(self) -> tuple[Hospitalization, dict, list[tuple[str, str, datetime]]]:
        for day in range(0, self.stay_days):
            self._progress_note(day)
        self._plant_imaging()
        self._plant_antibiotics()
        self._plant_diagnoses()
        self._add_id_noise_notes()
        self._add_handoffs()
        consult = self._build_id_consult()
        ds = self._build_discharge_summary()
        self._pad_notes()

        notes = []
        for draft in self.notes.values():
            notes.append(ClinicalNote(
                note_id=draft.note_id, timestamp=draft.timestamp,
                note_type=draft.note_type, note_type_raw=draft.note_type.value,
                author_service=draft.author_service,
                text="\n".join(draft.sentences)))
        notes.sort(key=lambda n: (n.timestamp, n.note_id))
        gold = GoldAttachments(
            procedures=tuple(self.procedures),
            billing_codes=tuple(self.billing_codes),
            id_consult_note_id=consult.note_id,
            discharge_summary_note_id=ds.note_id,
        )
        h = Hospitalization(self.eid, self.admit, self.discharge_time,
                            tuple(notes), gold)
        return h, self.truth, self.mar_rows

    # -- imaging -------------------------------------------------------------

    def _plant_imaging(self) -> None:
        n = self.rng.randint(*self.cfg.imaging_events)
        pool = self.rng.sample(IMAGING_POOL, min(n, len(IMAGING_POOL)))
        for desc, modality, location, surfaces in pool:
            day = self.rng.randint(1, max(1, self.stay_days - 2))
            when = self._at(day, 9, 30)
            self.procedures.append(ProcedureRow(desc, when))
            surface = self.rng.choice(surfaces)
            sentence = (f"{self.tag} underwent {surface} on {_md(when.date())}; "
                        f"radiology impression reviewed.")
            report_note = self._note(day, self.rng.randrange(10, 13),
                                     NoteType.IMAGING_REPORT, "radiology")
            report_note.sentences.append(f"{self.tag} radiology imaging report.")
            report_note.sentences.append(sentence)
            sentences = [sentence]
            if self.rng.random() < self.cfg.duplication_rate and day < self.stay_days - 1:
                self._later_note(day + 1, self.stay_days - 1).sentences.append(sentence)
            self.truth["imaging"].append({
                "modality": modality.value, "date": when.date().isoformat(),
                "location": location, "sentences": sentences})
        if self.rng.random() < self.cfg.distractor_rate:
            day = self.rng.randint(1, max(1, self.stay_days - 2))
            self.procedures.append(ProcedureRow("EKG 12 LEAD", self._at(day, 8, 15)))

    # -- antibiotics ----------------------------------------------------------

    def _plant_antibiotics(self) -> None:
        n = self.rng.randint(*self.cfg.abx_courses)
        picks = self.rng.sample(ABX_POOL, min(n, len(ABX_POOL)))
        for display, variants in picks:
            start_day = self.rng.randint(0, self.consult_day - 2)
            ongoing = self.rng.random() < 0.5
            end_day = self.consult_day if ongoing else \
                self.rng.randint(start_day, self.consult_day - 1)
            start = self._at(start_day, 0, 0).date()
            end = self._at(end_day, 0, 0).date()
            variant = self.rng.choice(variants)
            indication = self.rng.choice(_INDICATIONS)
            start_sentence = (f"{self.tag}: antibiotics active, {variant} "
                              f"started {_md(start)} for {indication}.")
            sentences = [start_sentence]
            self._progress_note(start_day).sentences.append(start_sentence)
            if not ongoing and end_day > start_day:
                stop_sentence = (f"{self.tag}: antibiotics narrowed, {variant} "
                                 f"stopped {_md(end)}.")
                sentences.append(stop_sentence)
                self._progress_note(end_day).sentences.append(stop_sentence)
            if self.rng.random() < self.cfg.duplication_rate:
                self._later_note(start_day + 1, self.consult_day - 1) \
                    .sentences.append(start_sentence)
            consult_name = self.rng.choice(variants)
            self.truth["antibiotics"].append({
                "display_name": display, "consult_name": consult_name,
                "start": start.isoformat(), "end": end.isoformat(),
                "ongoing": ongoing, "sentences": sentences, "decoy": False})
            for day in range(start_day, end_day + 1):
                self.mar_rows.append((self.rng.choice(variants), "anti-infective",
                                      self._at(day, 6, 0)))
        # prophylactic decoy: in the MAR (and sometimes the notes), never gold
        display, variants = self.rng.choice(PROPHYLAXIS_DECOYS)
        decoy_day = self.rng.randint(0, max(0, self.consult_day - 2))
        for day in range(decoy_day, min(decoy_day + 2, self.consult_day)):
            self.mar_rows.append((variants[0], "anti-infective", self._at(day, 6, 0)))
        decoy_sentence = (f"{self.tag} received perioperative {variants[0]} "
                          f"prophylaxis per protocol.")
        if self.rng.random() < 0.7:
            self._progress_note(decoy_day).sentences.append(decoy_sentence)
        self.truth["antibiotics"].append({
            "display_name": display, "consult_name": variants[0],
            "start": self._at(decoy_day, 0, 0).date().isoformat(),
            "end": self._at(decoy_day, 0, 0).date().isoformat(),
            "ongoing": False, "sentences": [decoy_sentence], "decoy": True})
        # unrelated MAR row outside the anti-infective class
        self.mar_rows.append(("insulin glargine", "hypoglycemics",
                              self._at(1, 21, 0)))

    # -- diagnoses -------------------------------------------------------------

    def _plant_diagnoses(self) -> None:
        n = self.rng.randint(*self.cfg.key_diagnoses)
        picks = self.rng.sample(DX_POOL, min(n, len(DX_POOL)))
        for canonical, code, variants in picks:
            surface = self.rng.choice(variants)
            day = self.rng.randint(0, max(0, self.stay_days - 2))
            sentence = (f"{self.tag} diagnoses updated: {surface}, "
                        f"requiring active management.")
            self._progress_note(day).sentences.append(sentence)
            sentences = [sentence]
            if self.rng.random() < self.cfg.duplication_rate and day < self.stay_days - 1:
                self._later_note(day + 1, self.stay_days - 1).sentences.append(sentence)
            self.billing_codes.append(code)
            self.truth["diagnoses"].append({
                "surface": canonical, "code": code,
                "sentences": sentences, "decoy": False})
            self.truth["filtered_codes"].append(code)
        decoys = self.rng.sample(DX_DECOYS, self.rng.randint(1, 3))
        for surface, code in decoys:
            self.billing_codes.append(code)
            self.truth["diagnoses"].append({
                "surface": surface, "code": code, "sentences": [], "decoy": True})
        self.billing_codes.sort()

    # -- remaining notes -------------------------------------------------------

    def _add_id_noise_notes(self) -> None:
        # notes by the ID service itself, excluded by antibiotics truncation
        for day in range(max(1, self.consult_day - 2), self.consult_day):
            if self.rng.random() < 0.6:
                note = self._note(day, 16, NoteType.PROGRESS, "infectious diseases")
                note.sentences.append(f"{self.tag} reviewed by ID team.")

    def _add_handoffs(self) -> None:
        for day in range(1, self.stay_days):
            if self.rng.random() < self.cfg.distractor_rate / 2:
                note = self._note(day, 19, NoteType.HANDOFF, "hospital medicine")
                note.sentences.append(f"{self.tag} handoff: overnight coverage.")

    def _build_id_consult(self) -> _NoteDraft:
        note = self._note(self.consult_day, 14, NoteType.ID_CONSULT,
                          "infectious diseases")
        note.timestamp = self.consult_time
        note.sentences.append(f"{self.tag} Infectious Diseases consultation.")
        note.sentences.append("Reason for consultation: management of active infection.")
        note.sentences.append("History of Anti-Infectives:")
        for course in self.truth["antibiotics"]:
            if course["decoy"]:
                continue
            start = date.fromisoformat(course["start"])
            end_text = "present" if course["ongoing"] else \
                _md(date.fromisoformat(course["end"]))
            note.sentences.append(f"{course['consult_name']}: {_md(start)}-{end_text}")
        note.sentences.append("")
        note.sentences.append("Assessment: continue current regimen; follow cultures.")
        return note

    def _build_discharge_summary(self) -> _NoteDraft:
        note = self._note(self.discharge_day, 11, NoteType.DISCHARGE_SUMMARY,
                          "hospital medicine")
        note.timestamp = self.ds_time
        note.sentences.append(f"{self.tag} discharge summary.")
        note.sentences.append("Hospital course: admitted for acute illness, "
                              "treated, and stabilized for discharge.")
        note.sentences.append("Discharge Diagnoses:")
        for i, dx in enumerate((d for d in self.truth["diagnoses"] if not d["decoy"]),
                               start=1):
            note.sentences.append(f"{i}. {dx['surface']}")
        note.sentences.append("")
        note.sentences.append("Disposition: home with follow-up.")
        return note

    def _pad_notes(self) -> None:
        # Filler is interleaved at random positions (never before the
        # opening line) so planted sentences land at varied token
        # offsets and fall inside several overlapping chunks, the way
        # key facts sit mid-note in real documentation.
        for draft in self.notes.values():
            if draft.note_type in (NoteType.ID_CONSULT, NoteType.DISCHARGE_SUMMARY):
                continue
            if self.rng.random() < self.cfg.distractor_rate:
                draft.sentences.insert(
                    self.rng.randint(1, len(draft.sentences)),
                    self.rng.choice(DISTRACTORS))
            target = self.rng.randint(*self.cfg.note_tokens)
            while count_tokens("\n".join(draft.sentences)) < target:
                filler = (f"{self.rng.choice(FILLER)} "
                          f"{self._vitals_line()}")
                draft.sentences.insert(
                    self.rng.randint(1, len(draft.sentences)), filler)

    def _vitals_line(self) -> str:
        return (f"HR {self.rng.randint(58, 110)}, "
                f"BP {self.rng.randint(98, 150)}/{self.rng.randint(55, 92)}, "
                f"T {self.rng.randint(366, 383) / 10:.1f}, "
                f"SpO2 {self.rng.randint(92, 100)}% RA.")


def generate_corpus(cfg: SynthConfig, out_dir: str | Path) -> dict[str, Path]:
    """Emit corpus.jsonl, per-encounter truth JSON, and mar.csv.

    Deterministic for a given config: the same seed produces the same
    bytes. Returns the paths keyed "corpus", "truth_dir", "mar".
    """
    cfg.validate()
    out_dir = Path(out_dir)
    truth_dir = out_dir / "truth"
    truth_dir.mkdir(parents=True, exist_ok=True)
    corpus_path = out_dir / "corpus.jsonl"
    mar_path = out_dir / "mar.csv"
    mar_lines = ["encounter_id,medication,class,admin_timestamp"]
    with corpus_path.open("w", encoding="utf-8") as fh:
        for i in range(cfg.n_encounters):
            h, truth, mar_rows = _EncounterBuilder(cfg, i).build()
            fh.write(record_to_json(h))
            fh.write("\n")
            (truth_dir / f"{h.encounter_id}.json").write_text(
                json.dumps(truth, indent=1, sort_keys=True, ensure_ascii=False),
                encoding="utf-8")
            for med, cls, ts in mar_rows:
                mar_lines.append(f"{h.encounter_id},{med},{cls},{format_timestamp(ts)}")
    mar_path.write_text("\n".join(mar_lines) + "\n", encoding="utf-8")
    return {"corpus": corpus_path, "truth_dir": truth_dir, "mar": mar_path}


# -- oracle ------------------------------------------------------------------


_BLOCK_MARKERS = {
    "imaging": ("Identification of Imaging Procedures",
                "Your response as a list of imaging types and locations:"),
    "antibiotics": ("Identification of Administered Antibiotics",
                    "Your response as a list of antibiotic names and date ranges:"),
    "diagnosis": ("Identification of Clinically Important Diagnoses",
                  "# Output the diagnoses"),
    "filter": ("Filter Billing Diagnosis Codes", None),
}


def _passage_block(prompt: str, tail_marker: str | None) -> str:
    anchor = prompt.rfind("EHR passages:")
    if anchor == -1:
        return prompt
    block = prompt[anchor + len("EHR passages:"):]
    if tail_marker:
        cut = block.rfind(tail_marker)
        if cut != -1:
            block = block[:cut]
    return block


class SynthOracle:
    """Answers task prompts from the planted truth, restricted to context.

    A fact is reported only when one of its source sentences appears
    verbatim inside the prompt's passage block; facts whose evidence was
    truncated away are omitted, like an honest reader would.
    """

    def __init__(self, truth_dir: str | Path) -> None:
        self.truths = []
        for path in sorted(Path(truth_dir).glob("*.json")):
            self.truths.append(json.loads(path.read_text(encoding="utf-8")))
        if not self.truths:
            raise EhrRagError(f"no truth files in {truth_dir}")

    def provider(self) -> CallableChatProvider:
        return CallableChatProvider("oracle", self.respond)

    def respond(self, request: ChatRequest) -> str:
        prompt = request.prompt_text
        for task, (head, tail) in _BLOCK_MARKERS.items():
            if head in prompt:
                if task == "filter":
                    return self._answer_filter(prompt)
                block = _passage_block(prompt, tail)
                if task == "imaging":
                    return self._answer_imaging(block)
                if task == "antibiotics":
                    return self._answer_antibiotics(block)
                return self._answer_diagnosis(block)
        raise EhrRagError("oracle cannot identify the task in this prompt")

    def _visible(self, fact: dict, block: str) -> bool:
        return any(sentence in block for sentence in fact["sentences"])

    def _answer_imaging(self, block: str) -> str:
        found = []
        for truth in self.truths:
            for event in truth["imaging"]:
                if self._visible(event, block):
                    when = date.fromisoformat(event["date"])
                    found.append((when, event["modality"], event["location"]))
        if not found:
            return "No imaging procedures identified."
        found.sort()
        return "\n".join(f"- ({_md(when)}) {modality} - None: {location}"
                         for when, modality, location in found)

    def _answer_antibiotics(self, block: str) -> str:
        found = []
        for truth in self.truths:
            for course in truth["antibiotics"]:
                if course["decoy"] or not self._visible(course, block):
                    continue
                start = date.fromisoformat(course["start"])
                end_text = "present" if course["ongoing"] else \
                    _md(date.fromisoformat(course["end"]))
                found.append((start, course["display_name"], end_text))
        found.sort()
        return "\n".join(f"- {name} ({_md(start)}-{end_text})"
                         for start, name, end_text in found)

    def _answer_diagnosis(self, block: str) -> str:
        found = sorted(
            dx["surface"]
            for truth in self.truths
            for dx in truth["diagnoses"]
            if not dx["decoy"] and self._visible(dx, block))
        return "\n".join(f"{i}. {surface}" for i, surface in enumerate(found, start=1))

    def _answer_filter(self, prompt: str) -> str:
        for truth in self.truths:
            if truth["tag"] in prompt:
                return "\n".join(truth["filtered_codes"])
        return ""


def load_corpus_with_truth(out_dir: str | Path) -> tuple[Corpus, SynthOracle]:
    """Convenience for tests: load an emitted synthetic corpus and its oracle."""
    from .corpus import load_corpus

    out_dir = Path(out_dir)
    corpus, report = load_corpus(out_dir / "corpus.jsonl")
    if not report.ok:
        raise EhrRagError(f"synthetic corpus failed validation: {report.kinds()[:5]}")
    return corpus, SynthOracle(out_dir / "truth")
