"""Sliding-window chunking and exact cosine retrieval.

One index per hospitalization. Retrieval is an exhaustive scan: at this
corpus scale exactness is cheap, and it keeps the brute-force
equivalence test meaningful. Chunks never cross note boundaries so each
carries a single timestamp for prompt rendering.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path

import numpy as np

from .corpus import ClinicalNote, Hospitalization, NoteType, TaskKind
from .embeddings import QUERY_PREFIX, EmbeddingProvider, embed
from .errors import EmptyIndex
from .tokenization import Tokenizer, get_tokenizer, sliding_window_spans

logger = logging.getLogger(__name__)

DEFAULT_WINDOW = 128
DEFAULT_STRIDE = 20

# Retrieval query text per task.
TASK_QUERIES: dict[TaskKind, str] = {
    TaskKind.IMAGING: "X-ray, CT, MRI, ultrasound, NM imaging, echocardiogram, fluoroscopy",
    TaskKind.ANTIBIOTICS: "What antibiotics is the patient taking?",
    TaskKind.DIAGNOSIS: "What are the patient's diagnoses?",
}

_EPOCH = datetime(1970, 1, 1)


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    encounter_id: str
    note_id: str
    note_timestamp: datetime
    note_type: NoteType
    token_span: tuple[int, int]
    text: str


@dataclass(frozen=True)
class RetrievalQuery:
    task: TaskKind
    text: str

    @property
    def prefixed_text(self) -> str:
        return QUERY_PREFIX + self.text


def default_query(task: TaskKind) -> RetrievalQuery:
    return RetrievalQuery(task=task, text=TASK_QUERIES[task])


def chunk_note(
    note: ClinicalNote,
    encounter_id: str,
    tokenizer: Tokenizer | None = None,
    window: int = DEFAULT_WINDOW,
    stride: int = DEFAULT_STRIDE,
) -> list[Chunk]:
    """Overlapping token windows over one note; notes with no tokens yield none."""
    tokenizer = tokenizer or get_tokenizer()
    token_spans = tokenizer.spans(note.text)
    if not token_spans:
        return []
    chunks = []
    for start, end in sliding_window_spans(len(token_spans), window, stride):
        char_start = token_spans[start][0]
        char_end = token_spans[end - 1][1]
        chunks.append(Chunk(
            chunk_id=f"{note.note_id}:{start}",
            encounter_id=encounter_id,
            note_id=note.note_id,
            note_timestamp=note.timestamp,
            note_type=note.note_type,
            token_span=(start, end),
            text=note.text[char_start:char_end],
        ))
    return chunks


class ChunkIndex:
    """Immutable chunk + vector table for one hospitalization."""

    def __init__(self, encounter_id: str, chunks: list[Chunk],
                 matrix: np.ndarray, provider: EmbeddingProvider) -> None:
        self.encounter_id = encounter_id
        self.chunks = tuple(chunks)
        self.matrix = matrix
        self.provider = provider
        self._ts = np.array(
            [(c.note_timestamp - _EPOCH).total_seconds() for c in self.chunks],
            dtype=np.int64)
        self._starts = np.array([c.token_span[0] for c in self.chunks], dtype=np.int64)
        self._ordinals = np.arange(len(self.chunks), dtype=np.int64)

    def __len__(self) -> int:
        return len(self.chunks)

    def retrieve(self, query: RetrievalQuery, n: int) -> list[tuple[Chunk, float]]:
        """Top-n chunks by cosine, exhaustively scored.

        Ties break by (note_timestamp asc, token start asc, build
        ordinal asc), giving a total order: repeated calls are identical
        and top-n is always a prefix of top-(n+1).
        """
        if n < 1:
            raise ValueError("n must be >= 1")
        if not self.chunks:
            raise EmptyIndex(f"{self.encounter_id}: index has no chunks")
        qv = embed([query.text], "query", self.provider)[0]
        scores = self.matrix @ qv
        order = np.lexsort((self._ordinals, self._starts, self._ts, -scores))
        top = order[:min(n, len(self.chunks))]
        return [(self.chunks[i], float(scores[i])) for i in top]


def retrieve_top_n(index: ChunkIndex, query: RetrievalQuery, n: int) -> list[tuple[Chunk, float]]:
    return index.retrieve(query, n)


def _config_hash(tokenizer_id: str, window: int, stride: int,
                 provider: EmbeddingProvider) -> str:
    key = json.dumps([tokenizer_id, window, stride, provider.provider_id, provider.dims])
    return hashlib.sha256(key.encode("utf-8")).hexdigest()[:16]


def _encounter_hash(h: Hospitalization) -> str:
    digest = hashlib.sha256()
    for note in h.notes:
        digest.update(note.note_id.encode("utf-8"))
        digest.update(b"\x00")
        digest.update(note.text.encode("utf-8"))
        digest.update(b"\x01")
    return digest.hexdigest()[:16]


def build_index(
    h: Hospitalization,
    provider: EmbeddingProvider,
    tokenizer: Tokenizer | None = None,
    window: int = DEFAULT_WINDOW,
    stride: int = DEFAULT_STRIDE,
    cache_dir: str | Path | None = None,
) -> ChunkIndex:
    """Chunk every note of h and embed the chunks as passages.

    With cache_dir set, vectors are reused from (and persisted to) one
    .npz per (encounter, configuration, note-content hash).
    """
    tokenizer = tokenizer or get_tokenizer()
    chunks: list[Chunk] = []
    for note in h.notes:  # notes sorted: ordinal encodes (timestamp, note_id, start)
        chunks.extend(chunk_note(note, h.encounter_id, tokenizer, window, stride))

    cache_path = None
    if cache_dir is not None:
        cfg = _config_hash(tokenizer.tokenizer_id, window, stride, provider)
        cache_path = Path(cache_dir) / cfg / f"{h.encounter_id}-{_encounter_hash(h)}.npz"
        if cache_path.exists():
            with np.load(cache_path) as data:
                matrix = data["vectors"]
            if matrix.shape[0] == len(chunks):
                return ChunkIndex(h.encounter_id, chunks, matrix, provider)
            logger.warning("stale vector cache %s, rebuilding", cache_path)

    matrix = embed([c.text for c in chunks], "passage", provider)
    if cache_path is not None:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(cache_path, vectors=matrix)
    return ChunkIndex(h.encounter_id, chunks, matrix, provider)
