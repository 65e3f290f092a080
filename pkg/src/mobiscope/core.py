"""Domain types shared by every stage of the pipeline.

All series are stored against a single :class:`DateIndex`; dates are handled
as integer day offsets from its start so that numerical code never touches
calendar arithmetic. Missing values carry an explicit boolean mask instead of
sentinel numbers. Every type here is treated as immutable after construction.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from datetime import date as Date, timedelta
from enum import Enum

import numpy as np

__all__ = [
    "Variable",
    "InterventionKind",
    "Commune",
    "DateIndex",
    "PanelSeries",
    "ODMatrix",
    "TransitionEvent",
    "TransitionLog",
    "ScheduleEntry",
    "InterventionSchedule",
    "StudyRegion",
    "treatment_day",
    "align",
    "window_mean",
    "moving_average",
    "add_case_derivatives",
]


class Variable(str, Enum):
    """Names of the per-unit panel variables."""

    SCORE = "score"
    MOB_IN = "mob_in"
    MOB_OUT = "mob_out"
    MOBILITY_INDEX = "mobility_index"
    CUM_CASES = "cum_cases"
    CUM_CASES_PER_100K = "cum_cases_per_100k"
    NEW_CASES = "new_cases"

    def __str__(self) -> str:  # pragma: no cover - cosmetic
        return self.value


class InterventionKind(str, Enum):
    """Kinds of confinement events a commune can go through."""

    PARTIAL_LOCKDOWN = "partial_lockdown"
    TOTAL_LOCKDOWN = "total_lockdown"
    PHASE2_TRANSITION = "phase2_transition"

    def __str__(self) -> str:  # pragma: no cover - cosmetic
        return self.value


@dataclass(frozen=True)
class Commune:
    """One administrative unit with its socioeconomic covariates."""

    id: str
    name: str
    population: int
    income_index: float
    is_rural: bool

    def __post_init__(self) -> None:
        if self.population < 1:
            raise ValueError(f"commune {self.id!r}: population must be >= 1")


@dataclass(frozen=True)
class DateIndex:
    """Calendar anchor for a study: a start date and a number of days."""

    start: Date
    n_days: int

    def __post_init__(self) -> None:
        if self.n_days < 1:
            raise ValueError("n_days must be >= 1")

    def __len__(self) -> int:
        return self.n_days

    def offset(self, day: Date) -> int:
        """Day offset of a calendar date; raises if outside the index."""
        off = (day - self.start).days
        if not 0 <= off < self.n_days:
            raise ValueError(f"date {day} outside index [{self.start}, {self.end})")
        return off

    def clip_offset(self, day: Date) -> int:
        """Day offset clipped into [0, n_days]; useful for window bounds."""
        return min(max((day - self.start).days, 0), self.n_days)

    def date_at(self, offset: int) -> Date:
        if not 0 <= offset < self.n_days:
            raise ValueError(f"offset {offset} outside [0, {self.n_days})")
        return self.start + timedelta(days=int(offset))

    @property
    def end(self) -> Date:
        """First date after the index (exclusive bound)."""
        return self.start + timedelta(days=self.n_days)

    def dates(self) -> list[Date]:
        return [self.start + timedelta(days=i) for i in range(self.n_days)]


def _as_float_array(values) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1:
        raise ValueError("values must be one-dimensional")
    return arr


@dataclass(frozen=True)
class PanelSeries:
    """A date-indexed numeric series for one unit of observation.

    ``missing`` marks days without data; ``values`` at masked positions are
    ignored by every consumer (and normalized to NaN on construction).
    """

    unit_id: str
    variable: str
    values: np.ndarray
    missing: np.ndarray

    def __post_init__(self) -> None:
        values = _as_float_array(self.values)
        missing = np.asarray(self.missing, dtype=bool)
        if missing.shape != values.shape:
            raise ValueError("missing mask must have the same length as values")
        values = values.copy()
        values[missing] = np.nan
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "missing", missing.copy())
        self.values.setflags(write=False)
        self.missing.setflags(write=False)
        self._validate_variable()

    def _validate_variable(self) -> None:
        present = self.values[~self.missing]
        if self.variable == Variable.SCORE and present.size:
            if present.min() < 0.0 or present.max() > 100.0:
                raise ValueError(f"score series {self.unit_id!r} outside [0, 100]")
        if self.variable in (Variable.CUM_CASES, Variable.CUM_CASES_PER_100K):
            if present.size and np.any(np.diff(present) < 0):
                raise ValueError(
                    f"cumulative series {self.unit_id!r}/{self.variable} decreases"
                )

    @classmethod
    def complete(cls, unit_id: str, variable: str, values) -> "PanelSeries":
        """Series with no missing days."""
        arr = _as_float_array(values)
        return cls(unit_id, variable, arr, np.zeros(arr.shape, dtype=bool))

    def __len__(self) -> int:
        return len(self.values)

    @property
    def n_present(self) -> int:
        return int((~self.missing).sum())

    def present_values(self) -> np.ndarray:
        return self.values[~self.missing]

    def equals(self, other: "PanelSeries") -> bool:
        return (
            self.unit_id == other.unit_id
            and str(self.variable) == str(other.variable)
            and np.array_equal(self.missing, other.missing)
            and np.array_equal(
                self.values[~self.missing], other.values[~other.missing]
            )
        )


def align(series: PanelSeries, window: tuple[int, int]) -> PanelSeries:
    """Slice a series to the half-open day window ``[a, b)``, keeping the mask.

    Raises ``ValueError`` when the window exceeds the series bounds.
    """
    a, b = window
    if not (0 <= a <= b <= len(series)):
        raise ValueError(f"window [{a}, {b}) out of bounds for length {len(series)}")
    return PanelSeries(
        series.unit_id, series.variable, series.values[a:b], series.missing[a:b]
    )


def window_mean(series: PanelSeries, window: tuple[int, int]) -> float:
    """Mask-aware mean over ``[a, b)``; NaN when no day is present."""
    sub = align(series, window)
    vals = sub.present_values()
    return float(vals.mean()) if vals.size else float("nan")


def moving_average(series: PanelSeries, width: int = 7) -> PanelSeries:
    """Centered moving average over present days; missing when none present.

    ``width`` must be odd so the window is symmetric around each day.
    """
    if width < 1 or width % 2 == 0:
        raise ValueError("width must be a positive odd integer")
    half = width // 2
    n = len(series)
    out = np.full(n, np.nan)
    miss = np.ones(n, dtype=bool)
    for t in range(n):
        lo, hi = max(0, t - half), min(n, t + half + 1)
        window_vals = series.values[lo:hi][~series.missing[lo:hi]]
        if window_vals.size:
            out[t] = window_vals.mean()
            miss[t] = False
    return PanelSeries(series.unit_id, series.variable, out, miss)


@dataclass(frozen=True)
class ODMatrix:
    """Directed trip counts between communes for one date and time slot.

    ``slot`` is the zero-padded ``HH:MM`` start of a half-hour interval.
    """

    date: Date
    slot: str
    trips: dict[tuple[str, str], int]

    def __post_init__(self) -> None:
        validate_slot(self.slot)
        for (o, d), count in self.trips.items():
            if count < 0:
                raise ValueError(f"negative trip count for {o}->{d} on {self.date}")

    def total_trips(self) -> int:
        return sum(self.trips.values())


def validate_slot(slot: str) -> None:
    """Accept only ``HH:MM`` strings on half-hour boundaries."""
    parts = slot.split(":")
    ok = (
        len(parts) == 2
        and len(parts[0]) == 2
        and len(parts[1]) == 2
        and parts[0].isdigit()
        and parts[1].isdigit()
        and 0 <= int(parts[0]) <= 23
        and int(parts[1]) in (0, 30)
    )
    if not ok:
        raise ValueError(f"invalid half-hour slot {slot!r}")


@dataclass(frozen=True)
class TransitionEvent:
    device: str
    timestamp: "np.datetime64 | object"  # datetime.datetime in practice
    antenna_id: str


@dataclass(frozen=True)
class TransitionLog:
    """Device antenna-connection events plus the antenna-to-commune map.

    Events are sorted by (device, timestamp) on construction; every event's
    antenna must be present in ``antenna_map`` (antenna id -> commune, lat, lon).
    """

    events: tuple[TransitionEvent, ...]
    antenna_map: dict[str, tuple[str, float, float]]

    def __post_init__(self) -> None:
        for ev in self.events:
            if ev.antenna_id not in self.antenna_map:
                raise ValueError(f"event references unmapped antenna {ev.antenna_id!r}")
        ordered = tuple(sorted(self.events, key=lambda e: (e.device, e.timestamp)))
        object.__setattr__(self, "events", ordered)

    def commune_of(self, antenna_id: str) -> str:
        return self.antenna_map[antenna_id][0]


@dataclass(frozen=True)
class ScheduleEntry:
    """One confinement entry: half-open day range ``[start_day, end_day)``.

    ``end_day`` is None for an entry still open at the end of the study.
    """

    commune_id: str
    start_day: int
    end_day: "int | None"
    kind: str

    def __post_init__(self) -> None:
        if self.end_day is not None and self.end_day < self.start_day:
            raise ValueError(
                f"entry for {self.commune_id!r}: end {self.end_day} before start"
            )
        InterventionKind(self.kind)  # raises on unknown kind

    def covers(self, day: int) -> bool:
        if day < self.start_day:
            return False
        return self.end_day is None or day < self.end_day


@dataclass(frozen=True)
class InterventionSchedule:
    """Per-commune timeline of confinement states.

    Same-kind entries of one commune must not overlap (half-open ranges);
    back-to-back entries sharing a boundary day are allowed.
    """

    entries: tuple[ScheduleEntry, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))
        by_key: dict[tuple[str, str], list[ScheduleEntry]] = {}
        for e in self.entries:
            by_key.setdefault((e.commune_id, str(e.kind)), []).append(e)
        for (commune, kind), group in by_key.items():
            group = sorted(group, key=lambda e: e.start_day)
            for prev, nxt in zip(group, group[1:]):
                prev_end = prev.end_day
                if prev_end is None or nxt.start_day < prev_end:
                    raise ValueError(
                        f"overlapping {kind} entries for commune {commune!r}"
                    )

    def for_commune(self, commune_id: str) -> tuple[ScheduleEntry, ...]:
        return tuple(e for e in self.entries if e.commune_id == commune_id)

    def active_kinds(self, commune_id: str, day: int) -> set[str]:
        return {
            str(e.kind)
            for e in self.entries
            if e.commune_id == commune_id and e.covers(day)
        }


def treatment_day(
    schedule: InterventionSchedule,
    commune_id: str,
    kind: str,
    known_communes: "set[str] | None" = None,
) -> "int | None":
    """Day offset of the first schedule entry of ``kind`` for a commune.

    Returns None when the commune never enters that state. When
    ``known_communes`` is given, an id outside it raises ``KeyError`` (this is
    how region-level lookups reject typos; a bare schedule cannot know the
    commune universe).
    """
    if known_communes is not None and commune_id not in known_communes:
        raise KeyError(f"unknown commune id {commune_id!r}")
    starts = [
        e.start_day
        for e in schedule.entries
        if e.commune_id == commune_id and str(e.kind) == str(kind)
    ]
    return min(starts) if starts else None


@dataclass(frozen=True)
class StudyRegion:
    """A full study: communes, calendar, panel series, and the schedule."""

    communes: dict[str, Commune]
    date_index: DateIndex
    panels: dict[tuple[str, str], PanelSeries] = field(default_factory=dict)
    schedule: InterventionSchedule = InterventionSchedule(())

    def __post_init__(self) -> None:
        for (unit, var), series in self.panels.items():
            if unit not in self.communes:
                raise ValueError(f"panel unit {unit!r} is not a known commune")
            if len(series) != self.date_index.n_days:
                raise ValueError(
                    f"series ({unit}, {var}) length {len(series)} != "
                    f"{self.date_index.n_days} days"
                )
            if series.unit_id != unit or str(series.variable) != str(var):
                raise ValueError(f"panel key ({unit}, {var}) does not match series")

    def panel(self, unit_id: str, variable: str) -> PanelSeries:
        return self.panels[(unit_id, str(variable))]

    def has_panel(self, unit_id: str, variable: str) -> bool:
        return (unit_id, str(variable)) in self.panels

    def units_with(self, variable: str) -> list[str]:
        var = str(variable)
        return sorted(u for (u, v) in self.panels if v == var)

    def treatment_day(self, commune_id: str, kind: str) -> "int | None":
        return treatment_day(self.schedule, commune_id, kind, set(self.communes))

    def with_panels(self, extra: dict[tuple[str, str], PanelSeries]) -> "StudyRegion":
        merged = dict(self.panels)
        merged.update({(u, str(v)): s for (u, v), s in extra.items()})
        return dataclasses.replace(self, panels=merged)


def add_case_derivatives(region: StudyRegion) -> StudyRegion:
    """Derive per-100k cumulative cases and daily new cases from cum_cases.

    new_cases[t] = cum[t] - cum[t-1] between consecutive present days; day 0
    (and the first present day of a series) is left missing.
    """
    extra: dict[tuple[str, str], PanelSeries] = {}
    for (unit, var), series in region.panels.items():
        if var != Variable.CUM_CASES.value:
            continue
        pop = region.communes[unit].population
        per100k = series.values * (100_000.0 / pop)
        extra[(unit, Variable.CUM_CASES_PER_100K.value)] = PanelSeries(
            unit, Variable.CUM_CASES_PER_100K, per100k, series.missing
        )
        n = len(series)
        new = np.full(n, np.nan)
        miss = np.ones(n, dtype=bool)
        prev_idx = None
        for t in range(n):
            if series.missing[t]:
                continue
            if prev_idx == t - 1:
                new[t] = series.values[t] - series.values[t - 1]
                miss[t] = False
            prev_idx = t
        extra[(unit, Variable.NEW_CASES.value)] = PanelSeries(
            unit, Variable.NEW_CASES, new, miss
        )
    return region.with_panels(extra)
