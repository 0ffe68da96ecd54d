"""Pure-Python kernels.

These are the reference implementations of the hot inner loops. The
compiled twin in _speedups.pyx must produce bit-identical results; the
parity test in tests/test_kernels.py enforces that whenever the extension
is importable.

Tokenizer rule set (id "rule-v1"):
  1. Unicode whitespace separates tokens and never belongs to one.
  2. A maximal run of alphanumeric characters (str.isalnum per character)
     is one token.
  3. Any other character (punctuation, symbol, underscore) is a
     single-character token.
"""

from __future__ import annotations

import re

import numpy as np

IMPLEMENTATION = "python"

# [^\W_] is exactly the set of characters for which str.isalnum() is true:
# regex \w is isalnum plus underscore.
_TOKEN_RE = re.compile(r"[^\W_]+|\S")

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF


def tokenize_spans(text: str) -> list[tuple[int, int]]:
    """Character (start, end) span of every rule-v1 token, left to right."""
    return [m.span() for m in _TOKEN_RE.finditer(text)]


def count_tokens(text: str) -> int:
    """Number of rule-v1 tokens in text."""
    n = 0
    for _ in _TOKEN_RE.finditer(text):
        n += 1
    return n


def fnv1a64(data: bytes) -> int:
    """FNV-1a 64-bit hash; stable across platforms and processes."""
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _U64
    return h


def hashed_bow_accumulate(text: str, dims: int) -> np.ndarray:
    """Raw signed hashed bag-of-words counts for the test embedding.

    Only alphanumeric tokens contribute; each is lowercased, FNV-1a
    hashed, and added to bucket h % dims with sign taken from the top
    hash bit. The caller is responsible for normalization.
    """
    out = np.zeros(dims, dtype=np.float64)
    for m in _TOKEN_RE.finditer(text):
        tok = m.group()
        if not tok[0].isalnum():
            continue
        h = fnv1a64(tok.lower().encode("utf-8"))
        sign = 1.0 if (h >> 63) & 1 == 0 else -1.0
        out[(h & 0x7FFFFFFFFFFFFFFF) % dims] += sign
    return out
