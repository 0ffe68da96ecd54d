"""Kernel selection: compiled extension when present, pure Python otherwise.

Set EHRRAG_PURE_PYTHON=1 to force the fallback even when the compiled
module is importable (used by the benchmark and the parity tests).
"""

from __future__ import annotations

import os

from . import fallback

if os.environ.get("EHRRAG_PURE_PYTHON") == "1":
    _impl = fallback
else:
    try:
        from . import _speedups as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = fallback

IMPLEMENTATION: str = _impl.IMPLEMENTATION

tokenize_spans = _impl.tokenize_spans
count_tokens = _impl.count_tokens
fnv1a64 = _impl.fnv1a64
hashed_bow_accumulate = _impl.hashed_bow_accumulate
