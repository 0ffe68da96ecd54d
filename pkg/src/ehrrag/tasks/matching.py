"""Maximum bipartite matching and micro-averaged P/R/F1.

Matching is Kuhn's augmenting-path algorithm: optimal and independent
of input order, unlike greedy pairing. Entry counts here are small
(predictions and gold for one encounter), so O(V*E) is plenty.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence, TypeVar

L = TypeVar("L")
R = TypeVar("R")


def max_bipartite_matching(
    left: Sequence[L],
    right: Sequence[R],
    compatible: Callable[[L, R], bool],
) -> list[tuple[int, int]]:
    """Maximum-cardinality one-to-one matching, as (left, right) index pairs."""
    adjacency = [[j for j, r in enumerate(right) if compatible(l, r)] for l in left]
    match_right: list[int | None] = [None] * len(right)

    def try_augment(i: int, visited: list[bool]) -> bool:
        for j in adjacency[i]:
            if visited[j]:
                continue
            visited[j] = True
            if match_right[j] is None or try_augment(match_right[j], visited):
                match_right[j] = i
                return True
        return False

    for i in range(len(left)):
        try_augment(i, [False] * len(right))
    return sorted((i, j) for j, i in enumerate(match_right) if i is not None)


def match_counts(
    pred: Sequence[L],
    gold: Sequence[R],
    compatible: Callable[[L, R], bool],
) -> tuple[int, int, int]:
    """(tp, fp, fn) under maximum one-to-one matching."""
    tp = len(max_bipartite_matching(pred, gold, compatible))
    return tp, len(pred) - tp, len(gold) - tp


@dataclass(frozen=True)
class PrfScore:
    precision: float  # percent
    recall: float
    f1: float
    degenerate: bool = False  # a zero denominator was hit


def micro_prf(tp: int, fp: int, fn: int) -> PrfScore:
    """Micro-averaged precision/recall/F1 on the 0..100 scale."""
    degenerate = False
    if tp + fp == 0:
        precision, degenerate = 0.0, True
    else:
        precision = 100.0 * tp / (tp + fp)
    if tp + fn == 0:
        recall, degenerate = 0.0, True
    else:
        recall = 100.0 * tp / (tp + fn)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return PrfScore(precision, recall, f1, degenerate)
