"""Price/driver ingestion, month boundaries, and the synthetic dataset generator.

All loaders return immutable containers (arrays are write-locked) so data can
be shared freely across threads. The trading calendar is simply the set of
dates present in the price file; no holiday logic.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import date as _date
from typing import NamedTuple

import numpy as np

from . import graph as graphmod
from .errors import ConfigError, ParseError, ValidationError

PRICE_HEADER = ["date", "index_id", "level"]
DRIVER_HEADER = ["date", "driver_id", "value"]


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def month_keys(dates: np.ndarray) -> np.ndarray:
    """Vectorized yyyymm integers for a datetime64[D] array."""
    months = dates.astype("datetime64[M]").astype(np.int64)
    return (1970 + months // 12) * 100 + (months % 12) + 1


@dataclass(frozen=True)
class PriceSeries:
    """Daily level history of one market index."""

    index_id: str
    dates: np.ndarray  # datetime64[D], strictly increasing
    levels: np.ndarray  # float64, strictly positive

    def __post_init__(self):
        dates = np.asarray(self.dates, dtype="datetime64[D]")
        levels = np.asarray(self.levels, dtype=np.float64)
        if dates.shape != levels.shape or dates.ndim != 1:
            raise ValidationError(
                f"series '{self.index_id}': dates and levels must be equal-"
                f"length vectors"
            )
        if len(dates) < 2:
            raise ValidationError(
                f"series '{self.index_id}': need at least 2 observations"
            )
        if not np.all(np.diff(dates).astype(np.int64) > 0):
            raise ValidationError(
                f"series '{self.index_id}': dates must be strictly increasing "
                f"with no duplicates"
            )
        if not np.all(np.isfinite(levels)) or np.any(levels <= 0.0):
            raise ValidationError(
                f"series '{self.index_id}': levels must be finite and > 0"
            )
        object.__setattr__(self, "dates", _freeze(dates))
        object.__setattr__(self, "levels", _freeze(levels))

    def __len__(self) -> int:
        return len(self.dates)

    def truncated(self, as_of: np.datetime64) -> "PriceSeries":
        """Copy containing only observations dated <= as_of."""
        mask = self.dates <= np.datetime64(as_of, "D")
        return PriceSeries(self.index_id, self.dates[mask].copy(),
                           self.levels[mask].copy())


@dataclass(frozen=True)
class DriverPanel:
    """Gap-filled raw-driver matrix: one row per date, one column per driver."""

    driver_ids: tuple[str, ...]
    dates: np.ndarray  # datetime64[D], strictly increasing
    values: np.ndarray  # float64 (n_dates, n_drivers)
    kinds: tuple[str, ...] = ()  # structured | unstructured, per driver

    def __post_init__(self):
        dates = np.asarray(self.dates, dtype="datetime64[D]")
        values = np.asarray(self.values, dtype=np.float64)
        kinds = self.kinds or tuple(
            graphmod.STRUCTURED for _ in self.driver_ids
        )
        if values.shape != (len(dates), len(self.driver_ids)):
            raise ValidationError(
                f"driver panel shape {values.shape} does not match "
                f"{len(dates)} dates x {len(self.driver_ids)} drivers"
            )
        if len(kinds) != len(self.driver_ids):
            raise ValidationError("one kind is required per driver")
        if len(dates) and not np.all(np.diff(dates).astype(np.int64) > 0):
            raise ValidationError("driver panel dates must be strictly increasing")
        if not np.all(np.isfinite(values)):
            raise ValidationError("driver panel contains non-finite values")
        object.__setattr__(self, "dates", _freeze(dates))
        object.__setattr__(self, "values", _freeze(values))
        object.__setattr__(self, "kinds", kinds)

    def column(self, driver_id: str) -> int:
        try:
            return self.driver_ids.index(driver_id)
        except ValueError:
            raise ConfigError(f"driver '{driver_id}' not present in panel") from None

    def truncated(self, as_of: np.datetime64) -> "DriverPanel":
        mask = self.dates <= np.datetime64(as_of, "D")
        return DriverPanel(self.driver_ids, self.dates[mask].copy(),
                           self.values[mask].copy(), self.kinds)


@dataclass(frozen=True)
class MonthBoundary:
    """Last trading day of a calendar month plus its trailing w-day window."""

    t: int  # yyyymm month key
    date: np.datetime64
    position: int  # index into the series' date vector
    window: int

    def __post_init__(self):
        if self.position + 1 < self.window:
            raise ValidationError(
                f"month {self.t}: only {self.position + 1} trading days "
                f"available before the boundary, window needs {self.window}"
            )

    @property
    def window_slice(self) -> slice:
        return slice(self.position - self.window + 1, self.position + 1)


def month_boundaries(dates: np.ndarray, window: int = 21) -> list[MonthBoundary]:
    """Month-end boundaries with a full trailing window of trading days.

    Months whose last trading day arrives before ``window`` observations exist
    are skipped (there is no full window to summarize yet).
    """
    dates = np.asarray(dates, dtype="datetime64[D]")
    if window < 1:
        raise ValidationError("window must be >= 1")
    keys = month_keys(dates)
    last_positions = np.append(np.nonzero(np.diff(keys))[0], len(dates) - 1)
    out = []
    for pos in last_positions:
        if pos + 1 < window:
            continue
        out.append(
            MonthBoundary(
                t=int(keys[pos]),
                date=dates[pos],
                position=int(pos),
                window=window,
            )
        )
    return out


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

def _parse_date(token: str, path, line_no: int) -> np.datetime64:
    try:
        return np.datetime64(_date.fromisoformat(token.strip()), "D")
    except ValueError:
        raise ParseError(
            f"{path}: line {line_no}: bad ISO-8601 date '{token}'"
        ) from None


def _parse_float(token: str, path, line_no: int) -> float:
    try:
        return float(token)
    except ValueError:
        raise ParseError(
            f"{path}: line {line_no}: bad numeric value '{token}'"
        ) from None


def _read_rows(path, header: list[str]):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        if [c.strip() for c in first] != header:
            raise ParseError(
                f"{path}: line 1: expected header '{','.join(header)}'"
            )
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ParseError(
                    f"{path}: line {line_no}: expected 3 fields, got {len(row)}"
                )
            yield line_no, row


def load_prices(path) -> list[PriceSeries]:
    """Load `date,index_id,level` rows into one PriceSeries per index id.

    Rows may appear in any order; each series is sorted by date. A duplicated
    date within one index id is rejected.
    """
    by_id: dict[str, list[tuple[np.datetime64, float]]] = {}
    for line_no, row in _read_rows(path, PRICE_HEADER):
        d = _parse_date(row[0], path, line_no)
        index_id = row[1].strip()
        if not index_id:
            raise ParseError(f"{path}: line {line_no}: empty index_id")
        level = _parse_float(row[2], path, line_no)
        by_id.setdefault(index_id, []).append((d, level))

    out = []
    for index_id in by_id:
        rows = sorted(by_id[index_id], key=lambda r: r[0])
        dates = np.array([r[0] for r in rows], dtype="datetime64[D]")
        if np.any(np.diff(dates).astype(np.int64) == 0):
            dup = dates[np.nonzero(np.diff(dates).astype(np.int64) == 0)[0][0]]
            raise ValidationError(
                f"{path}: index '{index_id}' has duplicated date {dup}"
            )
        levels = np.array([r[1] for r in rows], dtype=np.float64)
        out.append(PriceSeries(index_id=index_id, dates=dates, levels=levels))
    return out


def write_prices(path, series_list: list[PriceSeries]) -> None:
    """Inverse of load_prices; floats are written in shortest round-trip form."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PRICE_HEADER)
        for series in series_list:
            for d, level in zip(series.dates, series.levels):
                writer.writerow([str(d), series.index_id, repr(float(level))])


def load_drivers(path, schema: graphmod.CausalGraph) -> DriverPanel:
    """Load `date,driver_id,value` rows into a gap-filled panel.

    The panel is aligned to the union of dates present in the file; gaps are
    forward-filled and leading gaps back-filled from the first observation.
    Every driver referenced by the node-config must be present.
    """
    cells: dict[str, dict[np.datetime64, float]] = {}
    all_dates: set[np.datetime64] = set()
    order: list[str] = []
    for line_no, row in _read_rows(path, DRIVER_HEADER):
        d = _parse_date(row[0], path, line_no)
        driver_id = row[1].strip()
        if not driver_id:
            raise ParseError(f"{path}: line {line_no}: empty driver_id")
        value = _parse_float(row[2], path, line_no)
        if driver_id not in cells:
            cells[driver_id] = {}
            order.append(driver_id)
        if d in cells[driver_id]:
            raise ValidationError(
                f"{path}: line {line_no}: duplicate observation for "
                f"('{d}', '{driver_id}')"
            )
        cells[driver_id][d] = value
        all_dates.add(d)

    missing = [d for d in schema.referenced_driver_ids() if d not in cells]
    if missing:
        raise ConfigError(
            f"node-config references drivers absent from {path}: "
            f"{', '.join(repr(m) for m in missing)}"
        )

    dates = np.array(sorted(all_dates), dtype="datetime64[D]")
    values = np.full((len(dates), len(order)), np.nan)
    date_pos = {d: i for i, d in enumerate(dates)}
    for j, driver_id in enumerate(order):
        for d, v in cells[driver_id].items():
            values[date_pos[d], j] = v
    values = _ffill_columns(values, path, order)

    unstructured = set()
    for node in schema.nodes:
        if node.kind == graphmod.UNSTRUCTURED:
            unstructured.update(node.driver_ids)
    kinds = tuple(
        graphmod.UNSTRUCTURED if d in unstructured else graphmod.STRUCTURED
        for d in order
    )
    return DriverPanel(driver_ids=tuple(order), dates=dates, values=values,
                       kinds=kinds)


def _ffill_columns(values: np.ndarray, path, ids: list[str]) -> np.ndarray:
    n = len(values)
    for j in range(values.shape[1]):
        col = values[:, j]
        valid = np.isfinite(col)
        if not valid.any():
            raise ValidationError(f"{path}: driver '{ids[j]}' has no observations")
        # last-observation-carried-forward, then back-fill the leading gap
        idx = np.where(valid, np.arange(n), -1)
        np.maximum.accumulate(idx, out=idx)
        first = np.argmax(valid)
        idx[idx < 0] = first
        values[:, j] = col[idx]
    return values


def write_drivers(path, panel: DriverPanel) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DRIVER_HEADER)
        for i, d in enumerate(panel.dates):
            for j, driver_id in enumerate(panel.driver_ids):
                writer.writerow([str(d), driver_id, repr(float(panel.values[i, j]))])


def align_panel(panel: DriverPanel, dates: np.ndarray) -> np.ndarray:
    """Panel values re-indexed onto a trading calendar by last-known value.

    Target dates before the panel's first observation take the first row
    (same leading back-fill rule as loading).
    """
    dates = np.asarray(dates, dtype="datetime64[D]")
    idx = np.searchsorted(panel.dates, dates, side="right") - 1
    idx[idx < 0] = 0
    return panel.values[idx]


# ---------------------------------------------------------------------------
# Synthetic regime-switching generator
# ---------------------------------------------------------------------------

BULL, RANGE, BEAR = 1, 2, 3
_STATE_DELTA = {BULL: 1.0, RANGE: 0.0, BEAR: -1.0}


@dataclass(frozen=True)
class SyntheticParams:
    """Calibration of the hidden regime process and driver mixtures.

    Monthly log-drifts per state, total monthly volatility split into a
    systematic and an idiosyncratic part, and the regime-lead driver shift.
    """

    bull_drift: float = 0.04
    range_drift: float = 0.001
    bear_drift: float = -0.045
    monthly_vol: float = 0.009
    idio_vol: float = 0.004
    driver_noise: float = 1.0
    self_transition: float = 0.9
    start_month: str = "1972-01"

    def transition_matrix(self) -> np.ndarray:
        p = self.self_transition
        q = (1.0 - p) / 2.0
        return np.array([[p, q, q], [q, p, q], [q, q, p]])

    def state_drifts(self) -> np.ndarray:
        return np.array([self.bull_drift, self.range_drift, self.bear_drift])


def stationary_distribution(transition: np.ndarray) -> np.ndarray:
    """Left eigenvector of the transition matrix for eigenvalue 1."""
    vals, vecs = np.linalg.eig(transition.T)
    i = int(np.argmin(np.abs(vals - 1.0)))
    pi = np.real(vecs[:, i])
    return pi / pi.sum()


def implied_up_fraction(params: SyntheticParams) -> float:
    """Drift-implied long-run probability that a month closes up."""
    pi = stationary_distribution(params.transition_matrix())
    sigma = math.hypot(params.monthly_vol, params.idio_vol)
    phi = lambda x: 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))
    return float(sum(
        pi[i] * phi(mu / sigma) for i, mu in enumerate(params.state_drifts())
    ))


class SyntheticDataset(NamedTuple):
    prices: list[PriceSeries]
    panel: DriverPanel
    truth: dict[str, np.ndarray]  # index_id -> hidden state per month (1/2/3)


def _month_calendar(start_month: str, n_months: int) -> tuple[np.ndarray, np.ndarray]:
    """Weekday trading calendar; returns (dates, month ordinal per date)."""
    start = np.datetime64(start_month, "M")
    dates = []
    month_of = []
    for m in range(n_months):
        month = start + m
        first = month.astype("datetime64[D]")
        last = (month + 1).astype("datetime64[D]")
        days = np.arange(first, last)
        # numpy epoch day 0 is 1970-01-01, a Thursday: weekday = (day + 3) % 7
        weekdays = days[((days.view(np.int64) + 3) % 7) < 5]
        dates.append(weekdays)
        month_of.append(np.full(len(weekdays), m))
    return np.concatenate(dates), np.concatenate(month_of)


def generate_synthetic(
    seed: int,
    n_indices: int,
    n_drivers_per_node: int,
    n_months: int,
    signal_strength: float,
    n_nodes: int = 20,
    params: SyntheticParams | None = None,
    flip_signal_for: tuple[str, ...] = (),
) -> SyntheticDataset:
    """Seeded regime-switching dataset with an injected predictive signal.

    Every index follows one hidden market-wide 3-state chain (bull / range /
    bear drift) plus idiosyncratic noise. Driver means shift one month ahead
    of the regime in proportion to ``signal_strength``, so next-month
    direction is partially predictable from drivers. Indices named in
    ``flip_signal_for`` respond to the hidden state with the opposite sign,
    which makes the pooled signal systematically wrong for them.
    """
    if n_months < 24:
        raise ValidationError("n_months must be >= 24")
    if n_indices < 1 or n_drivers_per_node < 1 or n_nodes < 1:
        raise ValidationError("counts must be positive")
    if not 0.0 <= signal_strength <= 1.0:
        raise ValidationError("signal_strength must lie in [0, 1]")
    params = params or SyntheticParams()
    unknown = set(flip_signal_for) - {
        _synthetic_index_id(i) for i in range(n_indices)
    }
    if unknown:
        raise ValidationError(
            f"flip_signal_for names unknown indices: {sorted(unknown)}"
        )

    rng = np.random.default_rng(np.random.PCG64(seed))
    spec = graphmod.synthetic_graph(n_nodes, n_drivers_per_node)
    driver_ids = []
    kinds = []
    loadings = []
    for k, node in enumerate(spec.nodes):
        for j, did in enumerate(node.driver_ids):
            driver_ids.append(did)
            kinds.append(node.kind)
            loadings.append(0.6 + 0.1 * ((k * n_drivers_per_node + j) % 5))
    loadings = np.array(loadings)

    dates, month_of = _month_calendar(params.start_month, n_months)
    n_days = len(dates)

    # hidden market state chain; one extra month to lead the final drivers
    transition = params.transition_matrix()
    states = np.empty(n_months + 1, dtype=np.int64)
    states[0] = rng.integers(0, 3)
    for m in range(1, n_months + 1):
        states[m] = rng.choice(3, p=transition[states[m - 1]])

    # drivers lead the state by one month
    delta = np.array([1.0, 0.0, -1.0])  # bull / range / bear
    lead = delta[states[month_of + 1]]
    shift = signal_strength * lead[:, None] * loadings[None, :]
    values = shift + rng.normal(0.0, params.driver_noise, (n_days, len(driver_ids)))

    drifts = params.state_drifts()
    days_in_month = np.bincount(month_of, minlength=n_months)
    prices = []
    truth = {}
    for i in range(n_indices):
        index_id = _synthetic_index_id(i)
        sign = -1.0 if index_id in flip_signal_for else 1.0
        idio = rng.normal(0.0, params.idio_vol, n_months)
        eps = rng.normal(0.0, 1.0, n_days)
        mu_month = sign * drifts[states[:n_months]] + idio
        mu_day = mu_month[month_of] / days_in_month[month_of]
        sigma_day = params.monthly_vol / np.sqrt(days_in_month[month_of])
        log_returns = mu_day + sigma_day * eps
        levels = 100.0 * np.exp(np.cumsum(log_returns))
        prices.append(PriceSeries(index_id=index_id, dates=dates.copy(),
                                  levels=levels))
        month_states = states[:n_months] + 1  # map 0/1/2 -> BULL/RANGE/BEAR
        if sign < 0:
            month_states = np.where(month_states == BULL, BEAR,
                                    np.where(month_states == BEAR, BULL,
                                             month_states))
        truth[index_id] = month_states

    panel = DriverPanel(driver_ids=tuple(driver_ids), dates=dates.copy(),
                        values=values, kinds=tuple(kinds))
    return SyntheticDataset(prices=prices, panel=panel, truth=truth)


def _synthetic_index_id(i: int) -> str:
    return f"SYN{i:03d}"
