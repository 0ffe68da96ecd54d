"""Pluggable free-text to ICD-10 linking.

The default is a dictionary/alias exact matcher over a terminology CSV.
Any external linker can be mounted instead, speaking line-delimited JSON
({"text": ...} in, {"codes": [...]} out) over a subprocess pipe or HTTP.
Unlinkable text yields an empty set; callers flag and count it.
"""

from __future__ import annotations

import csv
import json
import logging
import re
import subprocess
import threading
from importlib import resources
from pathlib import Path
from typing import Protocol

from .ccsr import canonical_code

logger = logging.getLogger(__name__)


class DiagnosisLinker(Protocol):
    linker_id: str

    def link(self, text: str) -> frozenset[str]: ...


_NORM_RE = re.compile(r"\s+")


def _normalize_term(text: str) -> str:
    text = text.strip().lower().rstrip(".,;")
    return _NORM_RE.sub(" ", text)


class DictionaryLinker:
    """Exact term/alias lookup from a (term, aliases, icd_code) CSV."""

    linker_id = "dictionary"

    def __init__(self, path: str | Path | None = None) -> None:
        if path is None:
            text = resources.files("ehrrag").joinpath("data", "terminology.csv") \
                .read_text(encoding="utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        self.table: dict[str, frozenset[str]] = {}
        for row in csv.DictReader(text.splitlines()):
            codes = frozenset(canonical_code(c)
                              for c in row["icd_code"].split(";") if c.strip())
            if not codes:
                continue
            surfaces = [row["term"]] + [a for a in (row.get("aliases") or "").split(";")]
            for surface in surfaces:
                key = _normalize_term(surface)
                if key:
                    self.table.setdefault(key, codes)

    def link(self, text: str) -> frozenset[str]:
        return self.table.get(_normalize_term(text), frozenset())


class SubprocessLinker:
    """External linker over a line-delimited JSON pipe.

    The child process reads {"text": ...} lines on stdin and answers one
    {"codes": [...]} line per request on stdout.
    """

    linker_id = "subprocess"

    def __init__(self, command: list[str]) -> None:
        self.command = list(command)
        self._proc: subprocess.Popen | None = None
        self._lock = threading.Lock()

    def _ensure_process(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                text=True, bufsize=1)
        return self._proc

    def link(self, text: str) -> frozenset[str]:
        with self._lock:
            proc = self._ensure_process()
            proc.stdin.write(json.dumps({"text": text}) + "\n")
            proc.stdin.flush()
            line = proc.stdout.readline()
        if not line:
            logger.warning("subprocess linker produced no output for %r", text)
            return frozenset()
        try:
            codes = json.loads(line).get("codes", [])
        except json.JSONDecodeError:
            logger.warning("subprocess linker returned invalid JSON: %r", line)
            return frozenset()
        return frozenset(canonical_code(c) for c in codes)

    def close(self) -> None:
        if self._proc is not None and self._proc.poll() is None:
            self._proc.stdin.close()
            self._proc.wait(timeout=10)


class HttpLinker:
    """External linker over HTTP: POST {"text"} -> {"codes": [...]}."""

    linker_id = "http"

    def __init__(self, endpoint: str, timeout: float = 30.0) -> None:
        self.endpoint = endpoint
        self.timeout = timeout

    def link(self, text: str) -> frozenset[str]:
        import requests

        try:
            resp = requests.post(self.endpoint, json={"text": text}, timeout=self.timeout)
            resp.raise_for_status()
            codes = resp.json().get("codes", [])
        except Exception as exc:
            logger.warning("http linker failed for %r: %s", text, exc)
            return frozenset()
        return frozenset(canonical_code(c) for c in codes)
