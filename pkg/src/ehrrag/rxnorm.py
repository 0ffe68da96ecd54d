"""Medication-to-ingredient normalization through RxNorm.

Brand and generic names are resolved to ingredient sets so that "Zosyn"
and "piperacillin-tazobactam" compare equal. Lookup order: manual
override table, then the client. The recording client wraps the live
REST API and freezes every answer into a JSON fixture, so tests and CI
replay without network access.
"""

from __future__ import annotations

import json
import logging
import re
import threading
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Protocol

logger = logging.getLogger(__name__)

RXNAV_BASE = "https://rxnav.nlm.nih.gov/REST"


class RxNormClient(Protocol):
    def ingredients(self, name: str) -> list[str] | None:
        """Lowercase ingredient names, or None when unresolvable."""
        ...


class FixtureRxNormClient:
    """Replays recorded name -> ingredients answers from a JSON file."""

    def __init__(self, path: str | Path | None = None) -> None:
        if path is None:
            text = resources.files("ehrrag").joinpath("data", "rxnorm_ingredients.json") \
                .read_text(encoding="utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        self.table: dict[str, list[str]] = json.loads(text)

    def ingredients(self, name: str) -> list[str] | None:
        return self.table.get(name.strip().lower())


class LiveRxNormClient:
    """Talks to the public RxNorm REST endpoints.

    approximateTerm narrows the name to an rxcui, then the IN (ingredient)
    relations give the ingredient list.
    """

    def __init__(self, base_url: str = RXNAV_BASE, timeout: float = 15.0) -> None:
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def ingredients(self, name: str) -> list[str] | None:
        import requests

        try:
            resp = requests.get(f"{self.base_url}/approximateTerm.json",
                                params={"term": name, "maxEntries": 1},
                                timeout=self.timeout)
            resp.raise_for_status()
            candidates = (resp.json().get("approximateGroup") or {}).get("candidate") or []
            if not candidates:
                return None
            rxcui = candidates[0].get("rxcui")
            if not rxcui:
                return None
            resp = requests.get(f"{self.base_url}/rxcui/{rxcui}/related.json",
                                params={"tty": "IN"}, timeout=self.timeout)
            resp.raise_for_status()
            groups = (resp.json().get("relatedGroup") or {}).get("conceptGroup") or []
            names = sorted({
                concept["name"].strip().lower()
                for group in groups
                for concept in group.get("conceptProperties") or []
                if concept.get("name")
            })
            return names or None
        except Exception as exc:
            logger.warning("RxNorm lookup failed for %r: %s", name, exc)
            return None


class RecordingRxNormClient:
    """Fixture-first client that records live answers for later replay."""

    def __init__(self, live: RxNormClient, fixture_path: str | Path) -> None:
        self.live = live
        self.fixture_path = Path(fixture_path)
        self.table: dict[str, list[str]] = {}
        if self.fixture_path.exists():
            self.table = json.loads(self.fixture_path.read_text(encoding="utf-8"))

    def ingredients(self, name: str) -> list[str] | None:
        key = name.strip().lower()
        if key in self.table:
            return self.table[key] or None
        answer = self.live.ingredients(name)
        self.table[key] = answer or []
        self.fixture_path.parent.mkdir(parents=True, exist_ok=True)
        self.fixture_path.write_text(
            json.dumps(self.table, indent=1, sort_keys=True, ensure_ascii=False),
            encoding="utf-8")
        return answer


def load_overrides(path: str | Path | None = None) -> dict[str, frozenset[str]]:
    """Manual edge-case map (typos, local brand names) from CSV.

    Columns: raw_name, ingredients (semicolon-separated).
    """
    import csv

    if path is None:
        text = resources.files("ehrrag").joinpath("data", "med_overrides.csv") \
            .read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    table = {}
    for row in csv.DictReader(text.splitlines()):
        ingredients = frozenset(
            part.strip().lower() for part in row["ingredients"].split(";") if part.strip())
        if ingredients:
            table[row["raw_name"].strip().lower()] = ingredients
    return table


@dataclass(frozen=True)
class NormalizedMedication:
    ingredients: frozenset[str]
    resolved: bool  # False: kept as the lowercased raw name, flagged


_CLEAN_RE = re.compile(r"\s+")


class MedicationNormalizer:
    """Cached override-then-client ingredient resolution."""

    def __init__(self, client: RxNormClient | None = None,
                 overrides: dict[str, frozenset[str]] | None = None) -> None:
        self.client = client if client is not None else FixtureRxNormClient()
        self.overrides = overrides if overrides is not None else load_overrides()
        self._cache: dict[str, NormalizedMedication] = {}
        self._lock = threading.Lock()

    def normalize(self, name: str) -> NormalizedMedication:
        key = _CLEAN_RE.sub(" ", name.strip().lower())
        with self._lock:
            if key in self._cache:
                return self._cache[key]
        if key in self.overrides:
            result = NormalizedMedication(self.overrides[key], resolved=True)
        else:
            answer = self.client.ingredients(key)
            if answer:
                result = NormalizedMedication(
                    frozenset(i.lower() for i in answer), resolved=True)
            else:
                logger.warning("unresolved medication %r kept as raw name", name)
                result = NormalizedMedication(frozenset({key}), resolved=False)
        with self._lock:
            self._cache[key] = result
        return result
