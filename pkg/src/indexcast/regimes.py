"""Ex-post bull / range-bound / bear segmentation and cluster assignment.

Segmentation is a left-to-right scan implementing the classical ex-post
turning-point dating. While a segment is unconfirmed it tracks its running
trough and peak; the first time the price stands a fraction ``threshold``
above the running trough, the interval from the trough onward becomes a
confirmed bull segment anchored at the trough, and anything before the trough
closes as range-bound. Bear confirmation mirrors this around the running
peak. A confirmed bull ends at its peak: once the price crosses back below
the anchor or retraces ``threshold`` from the segment extreme, the segment is
closed at the extreme day and the days after the extreme are re-scanned as
the start of the next segment (so a bear dated from the peak can confirm
without a double retracement). A segment whose data ends before any
confirmation is range-bound.

Every close decision is made on the day that triggers it; that day index is
recorded as ``decided_pos`` so downstream consumers can tell which segments
had concluded by a given date. Truncating the series at any day and relabeling
reproduces exactly the segments whose decision day falls inside the
truncation, which is what keeps regime-conditioned statistics free of
lookahead.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass

import numpy as np

from .data import PriceSeries
from .errors import ValidationError


class Regime(enum.IntEnum):
    BULL = 1
    RANGE = 2
    BEAR = 3


@dataclass(frozen=True)
class RegimeSegment:
    """A labeled interval of one index's history.

    ``decided_pos`` is the position of the observation that closed the
    segment; the final segment of a series is closed by the end of the data
    instead and carries ``concluded=False``.
    """

    index_id: str
    start: np.datetime64
    end: np.datetime64
    kind: Regime
    anchor_level: float
    start_pos: int
    end_pos: int
    decided_pos: int
    concluded: bool

    def __post_init__(self):
        if self.start > self.end or self.start_pos > self.end_pos:
            raise ValidationError("segment start must not exceed its end")
        if not self.anchor_level > 0:
            raise ValidationError("anchor level must be positive")


def label_regimes(series: PriceSeries, threshold: float) -> list[RegimeSegment]:
    """Greedy left-to-right segmentation at relative threshold ``threshold``.

    Deterministic, O(n). Ties (a level exactly equal to a running extreme)
    keep the earliest extreme day.
    """
    if not 0.0 < threshold < 1.0:
        raise ValidationError(f"threshold must lie in (0, 1), got {threshold}")
    levels = series.levels
    dates = series.dates
    n = len(levels)
    if n < 2:
        raise ValidationError("series must contain at least 2 observations")

    up = 1.0 + threshold
    dn = 1.0 - threshold
    segments: list[RegimeSegment] = []

    def close(start: int, end: int, kind: Regime, anchor: float,
              decided: int) -> None:
        segments.append(
            RegimeSegment(
                index_id=series.index_id,
                start=dates[start],
                end=dates[end],
                kind=kind,
                anchor_level=float(anchor),
                start_pos=start,
                end_pos=end,
                decided_pos=decided,
                concluded=decided < n,
            )
        )

    start = 0
    run_min = run_max = levels[0]
    min_pos = max_pos = 0
    confirmed: Regime | None = None
    anchor = levels[0]
    extreme = levels[0]
    extreme_pos = 0
    clock = 0  # furthest observation consumed so far; decisions carry it

    def restart(at: int) -> None:
        nonlocal start, run_min, run_max, min_pos, max_pos, confirmed
        start = at
        run_min = run_max = levels[at]
        min_pos = max_pos = at
        confirmed = None

    j = 1
    while j < n:
        lev = levels[j]
        clock = max(clock, j)
        if confirmed is Regime.BULL:
            if lev < anchor or lev <= dn * extreme:
                close(start, extreme_pos, Regime.BULL, anchor, decided=clock)
                restart(extreme_pos + 1)
                # re-scan the slide off the peak as part of the next segment
                j = start + 1
                continue
            if lev > extreme:
                extreme = lev
                extreme_pos = j
        elif confirmed is Regime.BEAR:
            if lev > anchor or lev >= up * extreme:
                close(start, extreme_pos, Regime.BEAR, anchor, decided=clock)
                restart(extreme_pos + 1)
                j = start + 1
                continue
            if lev < extreme:
                extreme = lev
                extreme_pos = j
        else:
            if lev >= up * run_min:
                # bull confirmed, anchored at the running trough; the stretch
                # before the trough closes as range-bound
                if min_pos > start:
                    close(start, min_pos - 1, Regime.RANGE, levels[start],
                          decided=clock)
                start = min_pos
                anchor = levels[min_pos]
                extreme = lev
                extreme_pos = j
                confirmed = Regime.BULL
            elif lev <= dn * run_max:
                if max_pos > start:
                    close(start, max_pos - 1, Regime.RANGE, levels[start],
                          decided=clock)
                start = max_pos
                anchor = levels[max_pos]
                extreme = lev
                extreme_pos = j
                confirmed = Regime.BEAR
            else:
                if lev < run_min:
                    run_min = lev
                    min_pos = j
                if lev > run_max:
                    run_max = lev
                    max_pos = j
        j += 1

    final_kind = confirmed if confirmed is not None else Regime.RANGE
    final_anchor = anchor if confirmed is not None else levels[start]
    close(start, n - 1, final_kind, final_anchor, decided=n)
    return segments


@dataclass(frozen=True)
class ClusterAssignment:
    """Per-day cluster labels up to an as-of date.

    ``concluded_kind`` holds 1/2/3 for days inside a segment whose close was
    decided at or before ``as_of`` and 0 for days whose segment is still open.
    Cluster 4 (the long-term cycle) contains every day, so it needs no
    explicit storage.
    """

    dates: np.ndarray  # datetime64[D], the day grid truncated at as_of
    concluded_kind: np.ndarray  # int8, 0 = no concluded regime yet
    as_of: np.datetime64

    def members(self, cluster: int) -> np.ndarray:
        """Boolean day mask of one cluster; cluster 4 is all days."""
        if cluster == 4:
            return np.ones(len(self.dates), dtype=bool)
        if cluster in (1, 2, 3):
            return self.concluded_kind == cluster
        raise ValidationError(f"cluster must be 1..4, got {cluster}")


def assign_clusters(
    dates: np.ndarray,
    segments: list[RegimeSegment],
    as_of: np.datetime64,
) -> ClusterAssignment:
    """Cluster labels using only regimes whose close was decided by ``as_of``.

    The still-open segment contributes nothing to clusters 1-3; that is what
    keeps downstream rolling statistics free of label lookahead.
    """
    dates = np.asarray(dates, dtype="datetime64[D]")
    as_of = np.datetime64(as_of, "D")
    if len(dates) == 0 or as_of < dates[0]:
        raise ValidationError(f"as_of {as_of} precedes the first trading date")
    grid = dates[dates <= as_of]
    kind = np.zeros(len(grid), dtype=np.int8)
    for seg in segments:
        if not seg.concluded or seg.decided_pos > len(grid) - 1:
            continue
        lo = np.searchsorted(grid, seg.start, side="left")
        hi = np.searchsorted(grid, seg.end, side="right")
        kind[lo:hi] = int(seg.kind)
    return ClusterAssignment(dates=grid, concluded_kind=kind, as_of=as_of)


def segments_to_csv(path, segments: list[RegimeSegment]) -> None:
    """Debug export: one `index_id,start,end,kind,anchor` row per segment."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index_id", "start", "end", "kind", "anchor"])
        for seg in segments:
            writer.writerow([
                seg.index_id, str(seg.start), str(seg.end),
                seg.kind.name.lower(), repr(seg.anchor_level),
            ])
