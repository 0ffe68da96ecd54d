"""Deterministic tokenization and the sliding-window span law.

The default tokenizer ("rule-v1") is a rule-based splitter chosen for
reproducibility: no model vocabulary ships with the harness, so every
token count in budgets, chunk spans, and reports is relative to these
documented rules (see ehrrag._kernels.fallback for the rule text).
Exact model tokenizers can be plugged in through register_tokenizer.

Token counts are additive over whitespace-joined concatenation:
count(a + " " + b) == count(a) + count(b). Slicing a text at a token
start boundary preserves the tokenization of the suffix; context packing
relies on both properties.
"""

from __future__ import annotations

import math
from typing import Callable, Protocol

from . import _kernels

Span = tuple[int, int]


class Tokenizer(Protocol):
    """Anything that can split text into character spans of tokens."""

    tokenizer_id: str

    def spans(self, text: str) -> list[Span]: ...

    def count(self, text: str) -> int: ...


class RuleTokenizer:
    """The default rule-v1 splitter, backed by the selected kernel."""

    tokenizer_id = "rule-v1"

    def spans(self, text: str) -> list[Span]:
        return _kernels.tokenize_spans(text)

    def count(self, text: str) -> int:
        return _kernels.count_tokens(text)


_REGISTRY: dict[str, Callable[[], Tokenizer]] = {"rule-v1": RuleTokenizer}


def register_tokenizer(tokenizer_id: str, factory: Callable[[], Tokenizer]) -> None:
    _REGISTRY[tokenizer_id] = factory


def get_tokenizer(tokenizer_id: str = "rule-v1") -> Tokenizer:
    try:
        return _REGISTRY[tokenizer_id]()
    except KeyError:
        raise KeyError(f"unknown tokenizer id {tokenizer_id!r}") from None


def count_tokens(text: str) -> int:
    """Token count under the default rule-v1 tokenizer."""
    return _kernels.count_tokens(text)


def sliding_window_spans(n_tokens: int, window: int, stride: int) -> list[Span]:
    """Token (start, end) spans of overlapping windows over n_tokens.

    Emits max(1, ceil((n_tokens - window) / stride) + 1) windows.
    Consecutive windows start exactly `stride` tokens apart; the last is
    clipped at n_tokens, so every token is covered. n_tokens == 0 yields
    the single degenerate span (0, 0).
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    if not 1 <= stride <= window:
        raise ValueError("stride must be in 1..window")
    if n_tokens <= window:
        return [(0, n_tokens)]
    n_windows = math.ceil((n_tokens - window) / stride) + 1
    return [(i * stride, min(i * stride + window, n_tokens)) for i in range(n_windows)]
