"""Resolving month/day mentions to absolute dates.

Both the gold annotations and the model outputs write dates as "MM/DD";
the year has to come from the encounter window. A candidate year
qualifies when it lands the date inside [window_start - 30 days,
window_end + 1 day]; across a year boundary two candidates can qualify
and the one closest to the window end wins (ties break to the earlier
date). When nothing qualifies the nearest candidate is returned with a
flag so downstream scoring can surface it.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import date, timedelta

from ..errors import ImpossibleDate

_EARLY_SLACK = timedelta(days=30)
_LATE_SLACK = timedelta(days=1)


@dataclass(frozen=True)
class ResolvedDate:
    value: date
    out_of_window: bool = False


def resolve_relative_date(
    month: int,
    day: int,
    window_start: date,
    window_end: date,
) -> ResolvedDate:
    if not 1 <= month <= 12 or not 1 <= day <= 31:
        raise ImpossibleDate(f"{month:02d}/{day:02d} is not a month/day pair")
    candidates = []
    for year in range(window_start.year - 1, window_end.year + 2):
        try:
            candidates.append(date(year, month, day))
        except ValueError:
            continue
    if not candidates:
        raise ImpossibleDate(f"{month:02d}/{day:02d} exists in no candidate year")

    lo = window_start - _EARLY_SLACK
    hi = window_end + _LATE_SLACK
    qualifying = [c for c in candidates if lo <= c <= hi]
    if qualifying:
        best = min(qualifying, key=lambda c: (abs((c - window_end).days), c))
        return ResolvedDate(best)
    nearest = min(candidates,
                  key=lambda c: (min(abs((c - lo).days), abs((c - hi).days)), c))
    return ResolvedDate(nearest, out_of_window=True)
