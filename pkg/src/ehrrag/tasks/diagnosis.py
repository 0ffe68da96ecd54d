"""Diagnosis generation task: gold targets, linking, filtering, scoring.

Three gold targets exist for each hospitalization: the billed ICD-10
codes, the diagnoses listed in the discharge summary, and an
LLM-filtered subset of the billing codes restricted to the clinician's
primary foci (the primary target). Matching is fuzzy at the CCSR level:
a prediction matches a gold entry when their category sets intersect,
under maximum one-to-one matching.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from ..ccsr import CcsrTable, canonical_code
from ..errors import InvalidCode
from ..linker import DiagnosisLinker
from ..llm import ChatGateway, ChatRequest
from .matching import PrfScore, match_counts, micro_prf


class GoldTarget(str, enum.Enum):
    BILLING_CODES = "billing_codes"
    DISCHARGE_SUMMARY = "discharge_summary"
    FILTERED = "filtered"


@dataclass(frozen=True)
class DiagnosisEntry:
    surface_text: str | None
    icd_codes: frozenset[str]
    ccsr: frozenset[str]

    @property
    def mapped(self) -> bool:
        return bool(self.ccsr)


@dataclass
class DxReport:
    malformed: list[str] = field(default_factory=list)
    unlinked: list[str] = field(default_factory=list)  # text with no codes
    unmapped: list[str] = field(default_factory=list)  # codes with no categories
    duplicates: int = 0

    @property
    def n_excluded(self) -> int:
        return len(self.unlinked) + len(self.unmapped)


def entry_from_text(text: str, linker: DiagnosisLinker, table: CcsrTable,
                    report: DxReport) -> DiagnosisEntry | None:
    codes = linker.link(text)
    if not codes:
        report.unlinked.append(text)
        return None
    ccsr: frozenset[str] = frozenset()
    for code in codes:
        try:
            ccsr |= table.categories(code)
        except InvalidCode:
            pass
    if not ccsr:
        report.unmapped.append(text)
        return None
    return DiagnosisEntry(surface_text=text, icd_codes=frozenset(codes), ccsr=ccsr)


def entries_from_codes(codes: list[str] | tuple[str, ...], table: CcsrTable,
                       report: DxReport | None = None) -> list[DiagnosisEntry]:
    """One entry per ICD-10 code; unmapped codes are excluded and counted."""
    report = report if report is not None else DxReport()
    entries = []
    for code in codes:
        try:
            canon = canonical_code(code)
            ccsr = table.categories(canon)
        except InvalidCode:
            report.malformed.append(code)
            continue
        if not ccsr:
            report.unmapped.append(code)
            continue
        entries.append(DiagnosisEntry(surface_text=None,
                                      icd_codes=frozenset({canon}), ccsr=ccsr))
    return entries


_NUMBERED_RE = re.compile(r"^\s*\d+[.)]\s*(?P<text>.+?)\s*$")


def parse_llm_dx(text: str, linker: DiagnosisLinker,
                 table: CcsrTable) -> tuple[list[DiagnosisEntry], DxReport]:
    """Parse the model's numbered diagnosis list, link, and map.

    Entries that fail linking or mapping are excluded from matching but
    counted; duplicates (same CCSR set) are dropped after the first.
    """
    report = DxReport()
    entries: list[DiagnosisEntry] = []
    seen: set[frozenset[str]] = set()
    for line in text.splitlines():
        if not line.strip():
            continue
        m = _NUMBERED_RE.match(line)
        if not m:
            report.malformed.append(line)
            continue
        entry = entry_from_text(m.group("text"), linker, table, report)
        if entry is None:
            continue
        if entry.ccsr in seen:
            report.duplicates += 1
            continue
        seen.add(entry.ccsr)
        entries.append(entry)
    return entries, report


_DX_SECTION_RE = re.compile(r"discharge diagnos[ei]s", re.IGNORECASE)
_LISTED_RE = re.compile(r"^\s*(?:\d+[.)]|-|\*)\s*(?P<text>.+?)\s*$")


def diagnoses_from_discharge_summary(
    text: str, linker: DiagnosisLinker, table: CcsrTable,
) -> tuple[list[DiagnosisEntry], DxReport]:
    """Linked entries from the discharge summary's diagnoses section."""
    report = DxReport()
    lines = text.splitlines()
    start = next((i for i, line in enumerate(lines) if _DX_SECTION_RE.search(line)), None)
    if start is None:
        return [], report
    entries: list[DiagnosisEntry] = []
    seen: set[frozenset[str]] = set()
    for line in lines[start + 1:]:
        if not line.strip():
            break
        m = _LISTED_RE.match(line)
        if not m:
            report.malformed.append(line)
            continue
        entry = entry_from_text(m.group("text"), linker, table, report)
        if entry is not None and entry.ccsr not in seen:
            seen.add(entry.ccsr)
            entries.append(entry)
    return entries, report


DISCHARGE_SUMMARY_PLACEHOLDER = "[DISCHARGE SUMMARY]"
CODE_LIST_PLACEHOLDER = "[CODE LIST]"


def load_filter_template(template_dir: str | Path | None = None) -> str:
    if template_dir is not None:
        return (Path(template_dir) / "billing_filter.txt").read_text(encoding="utf-8")
    return resources.files("ehrrag").joinpath("data", "templates", "billing_filter.txt") \
        .read_text(encoding="utf-8")


@dataclass
class FilterReport:
    hallucinated: list[str] = field(default_factory=list)
    unparseable_response: bool = False


_CODE_TOKEN_RE = re.compile(r"\b[A-Z][0-9][0-9A-Z](?:\.?[0-9A-Z]{1,4})?\b")


def filter_billing_codes(
    codes: list[tuple[str, str]],
    discharge_summary: str,
    gateway: ChatGateway,
    model_id: str,
    template_dir: str | Path | None = None,
) -> tuple[list[str], FilterReport]:
    """Ask the gateway's model to keep only the primary-focus codes.

    Input is (code, description) pairs; the returned list is always a
    subset of the input codes. Codes the model invents are dropped with
    a warning; a response containing no recognizable code yields the
    empty list, flagged.
    """
    canon_inputs = {canonical_code(code): code for code, _ in codes}
    code_block = "\n".join(f"{code} {desc}".rstrip() for code, desc in codes)
    prompt = (load_filter_template(template_dir)
              .replace(DISCHARGE_SUMMARY_PLACEHOLDER, discharge_summary)
              .replace(CODE_LIST_PLACEHOLDER, code_block))
    response = gateway.complete(ChatRequest(
        provider_id=getattr(gateway.provider, "provider_id", "unknown"),
        model_id=model_id, prompt_text=prompt))
    report = FilterReport()
    kept: list[str] = []
    seen: set[str] = set()
    for token in _CODE_TOKEN_RE.findall(response.text.upper()):
        canon = canonical_code(token)
        if canon in seen:
            continue
        seen.add(canon)
        if canon in canon_inputs:
            kept.append(canon_inputs[canon])
        else:
            report.hallucinated.append(token)
    if not kept and response.text.strip() and not report.hallucinated:
        report.unparseable_response = True
    return kept, report


def _intersects(p: DiagnosisEntry, g: DiagnosisEntry) -> bool:
    return bool(p.ccsr & g.ccsr)


def match_dx(pred: list[DiagnosisEntry], gold: list[DiagnosisEntry]) -> tuple[int, int, int]:
    """(tp, fp, fn): maximum matching on nonempty CCSR intersection.

    Callers must already have excluded unmapped entries.
    """
    return match_counts([p for p in pred if p.mapped],
                        [g for g in gold if g.mapped], _intersects)


def score_dx(counts: list[tuple[int, int, int]]) -> PrfScore:
    tp = sum(c[0] for c in counts)
    fp = sum(c[1] for c in counts)
    fn = sum(c[2] for c in counts)
    return micro_prf(tp, fp, fn)
