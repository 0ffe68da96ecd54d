"""Embedding providers behind a small wire-compatible abstraction.

Queries are prepended with the retrieval instruction prefix before they
reach a provider; passages are embedded as-is. All vectors leaving
embed() are L2-normalized float64 rows of one matrix.

Wire contract for remote providers: HTTP POST of
{"inputs": [strings], "kind": "query"|"passage"} returning
{"vectors": [[f32 ...]]}.
"""

from __future__ import annotations

import logging
from typing import Iterable, Protocol

import numpy as np

from . import _kernels
from .errors import DimensionMismatch, ProviderUnavailable

logger = logging.getLogger(__name__)

QUERY_PREFIX = "Represent this sentence for searching relevant passages: "


class EmbeddingProvider(Protocol):
    provider_id: str
    dims: int
    max_batch: int

    def embed_raw(self, texts: list[str], kind: str) -> list[list[float]]: ...


class DeterministicTestProvider:
    """Hashed bag-of-words vectors; pure function of the input text.

    Exists so the whole pipeline can run hermetically: same text, same
    vector, on every machine. Not a semantic model, but token overlap is
    enough signal for the synthetic corpora used in tests.
    """

    provider_id = "deterministic-test"
    max_batch = 1024

    def __init__(self, dims: int = 64) -> None:
        self.dims = dims

    def embed_raw(self, texts: list[str], kind: str) -> list[list[float]]:
        return [_kernels.hashed_bow_accumulate(t, self.dims) for t in texts]


class HttpEmbeddingProvider:
    """Adapter speaking the documented embedding wire contract."""

    max_batch = 64

    def __init__(self, endpoint: str, dims: int, provider_id: str = "http",
                 timeout: float = 60.0) -> None:
        self.endpoint = endpoint
        self.dims = dims
        self.provider_id = provider_id
        self.timeout = timeout

    def embed_raw(self, texts: list[str], kind: str) -> list[list[float]]:
        import requests

        try:
            resp = requests.post(self.endpoint,
                                 json={"inputs": texts, "kind": kind},
                                 timeout=self.timeout)
            resp.raise_for_status()
            payload = resp.json()
        except Exception as exc:
            raise ProviderUnavailable(f"embedding endpoint {self.endpoint}: {exc}") from exc
        vectors = payload.get("vectors")
        if vectors is None or len(vectors) != len(texts):
            raise ProviderUnavailable(
                f"embedding endpoint returned {0 if vectors is None else len(vectors)} "
                f"vectors for {len(texts)} inputs")
        return vectors


def _normalize_rows(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1)
    zero = norms == 0.0
    if zero.any():
        # Tokenless inputs get the first basis vector so the normalized
        # invariant holds for every stored row.
        matrix[zero, 0] = 1.0
        norms[zero] = 1.0
    return matrix / norms[:, None]


def embed(texts: Iterable[str], kind: str, provider: EmbeddingProvider) -> np.ndarray:
    """Embed texts into one (n, dims) L2-normalized float64 matrix.

    kind="query" prepends the retrieval instruction prefix, so the
    provider always receives the prefixed string; kind="passage" passes
    text through untouched. Batching is handled here.
    """
    if kind not in ("query", "passage"):
        raise ValueError(f"kind must be 'query' or 'passage', got {kind!r}")
    items = list(texts)
    if kind == "query":
        items = [QUERY_PREFIX + t for t in items]
    rows: list[list[float]] = []
    for i in range(0, len(items), provider.max_batch):
        rows.extend(provider.embed_raw(items[i:i + provider.max_batch], kind))
    matrix = np.asarray(rows, dtype=np.float64)
    if matrix.size == 0:
        return np.zeros((0, provider.dims), dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[1] != provider.dims:
        raise DimensionMismatch(
            f"provider {provider.provider_id} returned shape {matrix.shape}, "
            f"expected (*, {provider.dims})")
    return _normalize_rows(matrix)


def make_provider(provider_id: str, **options) -> EmbeddingProvider:
    if provider_id == "deterministic-test":
        return DeterministicTestProvider(dims=int(options.get("dims", 64)))
    if provider_id == "http":
        return HttpEmbeddingProvider(
            endpoint=options["endpoint"],
            dims=int(options["dims"]),
            provider_id=options.get("name", "http"),
            timeout=float(options.get("timeout", 60.0)),
        )
    raise ProviderUnavailable(f"unknown embedding provider {provider_id!r}")
