"""Context selection strategies and prompt rendering.

Three ways to fill the model's input: retrieved chunks (rag), the most
recent whole notes under a token budget (recent), or the same packing
with a budget large enough for everything (full). Budgets include the
rendered template, so packing subtracts the template overhead first.

Every passage is rendered as a header line "YYYY-MM-DD HH:MM:SS
<note_type>" followed by the passage text and a blank line; the
antibiotics task depends on those timestamps.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from datetime import datetime
from importlib import resources
from pathlib import Path

from .corpus import Hospitalization, NoteType, TaskKind
from .errors import BudgetTooSmall, MissingNow
from .indexer import ChunkIndex, RetrievalQuery
from .tokenization import Tokenizer, get_tokenizer

CANONICAL_RAG_CHUNKS = (20, 40, 60)
CANONICAL_BUDGETS = (3000, 5500, 8000, 64000, 128000)

_TEMPLATE_FILES = {
    TaskKind.IMAGING: "imaging.txt",
    TaskKind.ANTIBIOTICS: "antibiotics.txt",
    TaskKind.DIAGNOSIS: "diagnosis.txt",
}

INSERT_PLACEHOLDER = "[INSERT TEXT]"
TIMESTAMP_PLACEHOLDER = "[TIMESTAMP]"

NO_IMAGING_SENTINEL = "No imaging procedures identified."


@dataclass(frozen=True)
class ContextStrategy:
    kind: str  # "rag" | "recent" | "full"
    n_chunks: int | None = None
    budget_tokens: int | None = None

    def __post_init__(self) -> None:
        if self.kind == "rag":
            if not self.n_chunks or self.n_chunks < 1:
                raise ValueError("rag strategy needs n_chunks >= 1")
        elif self.kind in ("recent", "full"):
            if not self.budget_tokens or self.budget_tokens < 1:
                raise ValueError(f"{self.kind} strategy needs budget_tokens >= 1")
        else:
            raise ValueError(f"unknown strategy kind {self.kind!r}")

    @property
    def label(self) -> str:
        if self.kind == "rag":
            return f"rag-{self.n_chunks}"
        return f"{self.kind}-{self.budget_tokens}"


def Rag(n_chunks: int) -> ContextStrategy:
    return ContextStrategy("rag", n_chunks=n_chunks)


def RecentNotes(budget_tokens: int) -> ContextStrategy:
    return ContextStrategy("recent", budget_tokens=budget_tokens)


def FullContext(budget_tokens: int) -> ContextStrategy:
    return ContextStrategy("full", budget_tokens=budget_tokens)


def parse_strategy(label: str) -> ContextStrategy:
    m = re.fullmatch(r"(rag|recent|full)-(\d+)", label)
    if not m:
        raise ValueError(f"unparseable strategy label {label!r}")
    kind, value = m.group(1), int(m.group(2))
    return Rag(value) if kind == "rag" else ContextStrategy(kind, budget_tokens=value)


@dataclass(frozen=True)
class Passage:
    timestamp: datetime
    note_type: str
    text: str


@dataclass(frozen=True)
class ContextBundle:
    strategy: ContextStrategy
    task: TaskKind
    passages: tuple[Passage, ...]
    prompt_tokens: int  # full rendered prompt, template included
    actual_ehr_tokens: int  # passage text only, headers excluded
    now: datetime | None = None


@dataclass(frozen=True)
class PromptInstance:
    task: TaskKind
    template_id: str
    rendered_text: str
    now_timestamp: datetime | None


def _format_ts(ts: datetime) -> str:
    return ts.strftime("%Y-%m-%d %H:%M:%S")


def passage_header(ts: datetime, note_type: str) -> str:
    return f"{_format_ts(ts)} {note_type}"


def format_passage_block(passages: tuple[Passage, ...] | list[Passage]) -> str:
    return "\n\n".join(f"{passage_header(p.timestamp, p.note_type)}\n{p.text}"
                       for p in passages)


_HEADER_RE = re.compile(r"^(\d{4}-\d{2}-\d{2} \d{2}:\d{2}:\d{2}) (\S+)$")


def parse_passage_block(block: str) -> list[Passage]:
    """Inverse of format_passage_block for round-trip checks and the oracle."""
    passages: list[Passage] = []
    current: list[str] | None = None
    header: tuple[datetime, str] | None = None
    for line in block.splitlines():
        m = _HEADER_RE.match(line)
        if m:
            if header is not None:
                passages.append(Passage(header[0], header[1], "\n".join(current).strip("\n")))
            header = (datetime.strptime(m.group(1), "%Y-%m-%d %H:%M:%S"), m.group(2))
            current = []
        elif current is not None:
            current.append(line)
    if header is not None:
        passages.append(Passage(header[0], header[1], "\n".join(current).strip("\n")))
    return passages


def load_template(task: TaskKind, template_dir: str | Path | None = None) -> str:
    """Task prompt template; defaults ship with the package."""
    name = _TEMPLATE_FILES[task]
    if template_dir is not None:
        return (Path(template_dir) / name).read_text(encoding="utf-8")
    return resources.files("ehrrag").joinpath("data", "templates", name).read_text(encoding="utf-8")


def render_prompt(
    task: TaskKind,
    bundle: ContextBundle,
    now: datetime | None = None,
    template_dir: str | Path | None = None,
) -> PromptInstance:
    """Fill the task template with the bundle's passages.

    The antibiotics template carries a "Right now it is [TIMESTAMP]."
    line and refuses to render without `now` (the ID-consult time).
    """
    now = now if now is not None else bundle.now
    template = load_template(task, template_dir)
    if task is TaskKind.ANTIBIOTICS:
        if now is None:
            raise MissingNow("antibiotics prompt requires the consult timestamp")
        template = template.replace(TIMESTAMP_PLACEHOLDER, _format_ts(now))
    if template.count(INSERT_PLACEHOLDER) != 1:
        raise ValueError(f"template for {task.value} must contain {INSERT_PLACEHOLDER} once")
    rendered = template.replace(INSERT_PLACEHOLDER, format_passage_block(bundle.passages))
    return PromptInstance(task=task, template_id=_TEMPLATE_FILES[task],
                          rendered_text=rendered, now_timestamp=now)


def template_overhead(
    task: TaskKind,
    tokenizer: Tokenizer,
    now: datetime | None = None,
    template_dir: str | Path | None = None,
) -> int:
    """Token count of the rendered template with an empty passage block."""
    empty = ContextBundle(strategy=FullContext(1), task=task, passages=(),
                          prompt_tokens=0, actual_ehr_tokens=0, now=now)
    return tokenizer.count(render_prompt(task, empty, now, template_dir).rendered_text)


def _tail_tokens(text: str, k: int, tokenizer: Tokenizer) -> str:
    """Last k tokens of text; slicing at a token start keeps counts exact."""
    spans = tokenizer.spans(text)
    if k >= len(spans):
        return text
    return text[spans[len(spans) - k][0]:]


def build_context(
    h: Hospitalization,
    strategy: ContextStrategy,
    task: TaskKind,
    index: ChunkIndex | None = None,
    query: RetrievalQuery | None = None,
    now: datetime | None = None,
    tokenizer: Tokenizer | None = None,
    template_dir: str | Path | None = None,
    partial_notes: bool = True,
) -> ContextBundle:
    """Select EHR text for one prompt under the given strategy.

    rag: top-N retrieved chunks, reordered chronologically.
    recent/full: whole notes newest-first until the budget (minus the
    rendered-template overhead) is exhausted, presented chronologically;
    with partial_notes the final (oldest) selected note is truncated
    from its beginning to fill the budget exactly.
    """
    tokenizer = tokenizer or get_tokenizer()
    base = template_overhead(task, tokenizer, now, template_dir)

    if strategy.kind == "rag":
        if index is None or query is None:
            raise ValueError("rag strategy requires an index and a query")
        hits = index.retrieve(query, strategy.n_chunks)
        ordered = sorted(hits, key=lambda hit: (hit[0].note_timestamp, hit[0].note_id,
                                                hit[0].token_span[0]))
        passages = tuple(Passage(c.note_timestamp, c.note_type.value, c.text)
                         for c, _ in ordered)
        ehr_tokens = sum(tokenizer.count(p.text) for p in passages)
        header_tokens = sum(tokenizer.count(passage_header(p.timestamp, p.note_type))
                            for p in passages)
        return ContextBundle(strategy=strategy, task=task, passages=passages,
                             prompt_tokens=base + ehr_tokens + header_tokens,
                             actual_ehr_tokens=ehr_tokens, now=now)

    budget = strategy.budget_tokens
    if base > budget:
        raise BudgetTooSmall(f"template needs {base} tokens, budget is {budget}")
    remaining = budget - base
    selected: list[Passage] = []  # newest first while packing
    used_ehr = 0
    for note in reversed(h.notes):
        header_cost = tokenizer.count(passage_header(note.timestamp, note.note_type.value))
        text_cost = tokenizer.count(note.text)
        if header_cost + text_cost <= remaining:
            selected.append(Passage(note.timestamp, note.note_type.value, note.text))
            remaining -= header_cost + text_cost
            used_ehr += text_cost
            continue
        if partial_notes and remaining > header_cost:
            keep = remaining - header_cost
            selected.append(Passage(note.timestamp, note.note_type.value,
                                    _tail_tokens(note.text, keep, tokenizer)))
            remaining = 0
            used_ehr += keep
        break
    selected.reverse()
    return ContextBundle(strategy=strategy, task=task, passages=tuple(selected),
                         prompt_tokens=budget - remaining,
                         actual_ehr_tokens=used_ehr, now=now)
