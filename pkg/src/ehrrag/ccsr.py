"""ICD-10 to CCSR clinical category mapping.

The table is the HCUP DXCCSR CSV (many-to-many: one code can belong to
several of the ~530 categories). Codes are canonicalized to dotless
uppercase. Non-billable parents absent from the table are resolved by
intersecting the category sets of their mapped subcodes.
"""

from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import EmptyTable, InvalidCode

logger = logging.getLogger(__name__)

_CODE_RE = re.compile(r"^[A-Z][0-9][0-9A-Z][0-9A-Z]{0,4}$")


def canonical_code(code: str) -> str:
    return code.strip().strip("'\"").replace(".", "").upper()


def validate_code(code: str) -> str:
    canon = canonical_code(code)
    if not _CODE_RE.match(canon):
        raise InvalidCode(f"{code!r} is not a syntactically valid ICD-10 code")
    return canon


@dataclass
class CcsrLoadReport:
    malformed_rows: list[str] = field(default_factory=list)
    n_codes: int = 0
    n_categories: int = 0


@dataclass(frozen=True)
class CcsrTable:
    code_to_categories: dict[str, frozenset[str]]
    category_descriptions: dict[str, str]
    code_descriptions: dict[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.code_to_categories)

    def categories(self, code: str) -> frozenset[str]:
        """Categories for a canonical code, with the subcode-intersection
        fallback for unmapped parents. Empty set means unmapped."""
        canon = validate_code(code)
        direct = self.code_to_categories.get(canon)
        if direct is not None:
            return direct
        descendant_sets = [cats for mapped, cats in self.code_to_categories.items()
                           if mapped.startswith(canon)]
        if not descendant_sets:
            return frozenset()
        result = descendant_sets[0]
        for cats in descendant_sets[1:]:
            result &= cats
        return result


def _clean_header(name: str) -> str:
    return name.strip().strip("'\"").upper()


def load_ccsr(path: str | Path) -> tuple[CcsrTable, CcsrLoadReport]:
    """Load a CCSR CSV in the HCUP column layout.

    Detects the code column and the numbered "CCSR CATEGORY n" columns
    by header name; values may carry HCUP's single-quote wrapping.
    Duplicate rows merge; rows with a code but no category are reported.
    """
    path = Path(path)
    report = CcsrLoadReport()
    code_to_categories: dict[str, set[str]] = {}
    descriptions: dict[str, str] = {}
    code_descriptions: dict[str, str] = {}
    with path.open(encoding="utf-8", newline="") as fh:
        # HCUP wraps fields in single quotes; descriptions contain commas.
        reader = csv.reader(fh, quotechar="'")
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyTable(f"{path}: no header row") from None
        cleaned = [_clean_header(h) for h in header]
        code_idx = next((i for i, h in enumerate(cleaned)
                         if "ICD-10" in h and "CODE" in h
                         and "DESCRIPTION" not in h and "DEFAULT" not in h), None)
        if code_idx is None:
            raise EmptyTable(f"{path}: no ICD-10 code column found")
        code_desc_idx = next((i for i, h in enumerate(cleaned)
                              if "ICD-10" in h and "CODE" in h
                              and "DESCRIPTION" in h and "DEFAULT" not in h), None)
        category_idxs = [i for i, h in enumerate(cleaned)
                         if re.fullmatch(r"CCSR CATEGORY \d+", h)]
        description_idxs = {i: i + 1 for i in category_idxs
                            if i + 1 < len(cleaned) and "DESCRIPTION" in cleaned[i + 1]}
        for row in reader:
            if not row or not row[code_idx].strip():
                continue
            try:
                code = validate_code(row[code_idx])
            except InvalidCode:
                report.malformed_rows.append(",".join(row))
                continue
            categories = set()
            for idx in category_idxs:
                if idx >= len(row):
                    continue
                value = row[idx].strip().strip("'\"")
                if not value:
                    continue
                categories.add(value)
                desc_idx = description_idxs.get(idx)
                if desc_idx is not None and desc_idx < len(row):
                    desc = row[desc_idx].strip().strip("'\"")
                    if desc:
                        descriptions.setdefault(value, desc)
            if not categories:
                report.malformed_rows.append(",".join(row))
                continue
            code_to_categories.setdefault(code, set()).update(categories)
            if code_desc_idx is not None and code_desc_idx < len(row):
                desc = row[code_desc_idx].strip().strip("'\"")
                if desc:
                    code_descriptions.setdefault(code, desc)
    if not code_to_categories:
        raise EmptyTable(f"{path}: no usable rows")
    report.n_codes = len(code_to_categories)
    report.n_categories = len({c for cats in code_to_categories.values() for c in cats})
    logger.info("CCSR table: %d codes, %d categories", report.n_codes, report.n_categories)
    return CcsrTable(
        code_to_categories={c: frozenset(v) for c, v in code_to_categories.items()},
        category_descriptions=descriptions,
        code_descriptions=code_descriptions,
    ), report


def icd_to_ccsr(code: str, table: CcsrTable) -> frozenset[str]:
    return table.categories(code)
