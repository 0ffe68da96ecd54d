# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled twins of the kernels in ehrrag._kernels.fallback.

Must stay bit-identical to the fallback: same token spans, same hash,
same accumulation order. tests/test_kernels.py checks parity.
"""

from cpython.bytes cimport PyBytes_AS_STRING, PyBytes_GET_SIZE
from cpython.unicode cimport Py_UNICODE_ISALNUM, Py_UNICODE_ISSPACE

import numpy as np

IMPLEMENTATION = "cython"


cdef unsigned long long _fnv_bytes(bytes data):
    cdef const char* p = PyBytes_AS_STRING(data)
    cdef Py_ssize_t i, n = PyBytes_GET_SIZE(data)
    cdef unsigned long long h = 0xCBF29CE484222325ULL
    for i in range(n):
        h = (h ^ <unsigned char>p[i]) * 0x100000001B3ULL
    return h


def tokenize_spans(str text):
    """Character (start, end) span of every rule-v1 token, left to right."""
    cdef Py_ssize_t i = 0, n = len(text), start
    cdef Py_UCS4 ch
    spans = []
    while i < n:
        ch = text[i]
        if Py_UNICODE_ISSPACE(ch):
            i += 1
            continue
        if Py_UNICODE_ISALNUM(ch):
            start = i
            i += 1
            while i < n and Py_UNICODE_ISALNUM(<Py_UCS4>text[i]):
                i += 1
            spans.append((start, i))
        else:
            spans.append((i, i + 1))
            i += 1
    return spans


def count_tokens(str text):
    """Number of rule-v1 tokens in text."""
    cdef Py_ssize_t i = 0, n = len(text), count = 0
    cdef Py_UCS4 ch
    while i < n:
        ch = text[i]
        if Py_UNICODE_ISSPACE(ch):
            i += 1
        elif Py_UNICODE_ISALNUM(ch):
            count += 1
            i += 1
            while i < n and Py_UNICODE_ISALNUM(<Py_UCS4>text[i]):
                i += 1
        else:
            count += 1
            i += 1
    return count


def fnv1a64(bytes data):
    """FNV-1a 64-bit hash; stable across platforms and processes."""
    return _fnv_bytes(data)


def hashed_bow_accumulate(str text, int dims):
    """Raw signed hashed bag-of-words counts for the test embedding."""
    out = np.zeros(dims, dtype=np.float64)
    cdef double[::1] buf = out
    cdef Py_ssize_t i = 0, n = len(text), start
    cdef Py_UCS4 ch
    cdef unsigned long long h, udims = <unsigned long long>dims
    while i < n:
        ch = text[i]
        if Py_UNICODE_ISSPACE(ch):
            i += 1
            continue
        if Py_UNICODE_ISALNUM(ch):
            start = i
            i += 1
            while i < n and Py_UNICODE_ISALNUM(<Py_UCS4>text[i]):
                i += 1
            h = _fnv_bytes(text[start:i].lower().encode("utf-8"))
            if (h >> 63) & 1:
                buf[(h & 0x7FFFFFFFFFFFFFFFULL) % udims] += -1.0
            else:
                buf[(h & 0x7FFFFFFFFFFFFFFFULL) % udims] += 1.0
        else:
            i += 1
    return out
