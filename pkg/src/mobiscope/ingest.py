"""CSV ingestion and serialization for every input dataset.

All files are UTF-8 CSV with a mandatory header row and fixed column order:

- hex_scores.csv:  ``date,hex_id,commune_id,displacements``
- od.csv:          ``date,slot,origin,destination,trips``
- transitions.csv: ``device,timestamp,antenna_id``
- antennas.csv:    ``antenna_id,commune_id,lat,lon``
- cases.csv:       ``date,commune_id,cum_cases``
- socio.csv:       ``commune_id,name,population,income_index,is_rural``
- schedule.csv:    ``commune_id,start,end,kind`` (empty ``end`` = still open)

Dates are ISO-8601 (``YYYY-MM-DD``), timestamps ``YYYY-MM-DDTHH:MM:SS``, time
slots the zero-padded ``HH:MM`` start of a half-hour interval. Readers are
pure functions of their file; malformed rows raise :class:`SchemaError` with
the 1-based line number. Non-monotone cumulative case series are repaired by
running maximum and logged as warnings rather than rejected.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from datetime import date as Date, datetime
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .core import (
    Commune,
    DateIndex,
    InterventionSchedule,
    ODMatrix,
    PanelSeries,
    ScheduleEntry,
    TransitionEvent,
    TransitionLog,
    Variable,
    validate_slot,
)

logger = logging.getLogger("mobiscope.ingest")

__all__ = [
    "SchemaError",
    "DuplicateKeyError",
    "HexScoreRecord",
    "read_hex_scores",
    "write_hex_scores",
    "read_od",
    "write_od",
    "read_transitions",
    "write_transitions",
    "read_cases",
    "write_cases",
    "read_socio",
    "write_socio",
    "read_schedule",
    "write_schedule",
    "infer_date_index",
    "load_region",
]

HEADERS = {
    "hex_scores": ["date", "hex_id", "commune_id", "displacements"],
    "od": ["date", "slot", "origin", "destination", "trips"],
    "transitions": ["device", "timestamp", "antenna_id"],
    "antennas": ["antenna_id", "commune_id", "lat", "lon"],
    "cases": ["date", "commune_id", "cum_cases"],
    "socio": ["commune_id", "name", "population", "income_index", "is_rural"],
    "schedule": ["commune_id", "start", "end", "kind"],
}


class SchemaError(ValueError):
    """A file violates its documented schema."""

    def __init__(self, file: "str | Path", line: int, reason: str):
        self.file = str(file)
        self.line = int(line)
        self.reason = reason
        super().__init__(f"{self.file}:{self.line}: {reason}")


class DuplicateKeyError(SchemaError):
    """Two rows carry the same primary key."""


class HexScoreRecord(NamedTuple):
    date: Date
    hex_id: str
    commune_id: str
    displacements: int


def _open_rows(path: "str | Path", kind: str):
    """Yield (line_number, row) after checking the exact header."""
    expected = HEADERS[kind]
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(path, 1, "empty file, header row required") from None
        if [h.strip() for h in header] != expected:
            raise SchemaError(
                path, 1, f"header {header!r} != expected {expected!r}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected):
                raise SchemaError(
                    path, lineno, f"expected {len(expected)} columns, got {len(row)}"
                )
            yield lineno, row


def _parse_date(path, lineno, text: str) -> Date:
    try:
        return Date.fromisoformat(text.strip())
    except ValueError:
        raise SchemaError(path, lineno, f"invalid date {text!r}") from None


def _parse_int(path, lineno, text: str, name: str, minimum: "int | None" = None) -> int:
    try:
        value = int(text.strip())
    except ValueError:
        raise SchemaError(path, lineno, f"invalid integer {name}={text!r}") from None
    if minimum is not None and value < minimum:
        raise SchemaError(path, lineno, f"{name}={value} below minimum {minimum}")
    return value


def _parse_float(path, lineno, text: str, name: str) -> float:
    try:
        return float(text.strip())
    except ValueError:
        raise SchemaError(path, lineno, f"invalid number {name}={text!r}") from None


def read_hex_scores(path: "str | Path") -> list[HexScoreRecord]:
    """Raw per-hexagon displacement counts, one record per (date, hexagon)."""
    records: list[HexScoreRecord] = []
    seen: set[tuple[Date, str]] = set()
    assignment: dict[str, str] = {}
    for lineno, row in _open_rows(path, "hex_scores"):
        day = _parse_date(path, lineno, row[0])
        hex_id, commune_id = row[1].strip(), row[2].strip()
        count = _parse_int(path, lineno, row[3], "displacements", minimum=0)
        key = (day, hex_id)
        if key in seen:
            raise DuplicateKeyError(path, lineno, f"duplicate (date, hex) {key!r}")
        seen.add(key)
        previous = assignment.setdefault(hex_id, commune_id)
        if previous != commune_id:
            raise SchemaError(
                path,
                lineno,
                f"hexagon {hex_id!r} assigned to both {previous!r} and {commune_id!r}",
            )
        records.append(HexScoreRecord(day, hex_id, commune_id, count))
    return records


def write_hex_scores(path: "str | Path", records: Iterable[HexScoreRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(HEADERS["hex_scores"])
        for r in records:
            writer.writerow([r.date.isoformat(), r.hex_id, r.commune_id, r.displacements])


def read_od(
    path: "str | Path", known_communes: "set[str] | None" = None
) -> list[ODMatrix]:
    """One ODMatrix per (date, slot), sorted by (date, slot)."""
    cells: dict[tuple[Date, str], dict[tuple[str, str], int]] = {}
    for lineno, row in _open_rows(path, "od"):
        day = _parse_date(path, lineno, row[0])
        slot = row[1].strip()
        try:
            validate_slot(slot)
        except ValueError as exc:
            raise SchemaError(path, lineno, str(exc)) from None
        origin, dest = row[2].strip(), row[3].strip()
        if known_communes is not None:
            for cid in (origin, dest):
                if cid not in known_communes:
                    raise SchemaError(path, lineno, f"unknown commune id {cid!r}")
        trips = _parse_int(path, lineno, row[4], "trips", minimum=0)
        bucket = cells.setdefault((day, slot), {})
        if (origin, dest) in bucket:
            raise DuplicateKeyError(
                path, lineno, f"duplicate (date,slot,origin,destination) "
                f"({day},{slot},{origin},{dest})"
            )
        bucket[(origin, dest)] = trips
    return [
        ODMatrix(day, slot, trips)
        for (day, slot), trips in sorted(cells.items(), key=lambda kv: kv[0])
    ]


def write_od(path: "str | Path", matrices: Iterable[ODMatrix]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(HEADERS["od"])
        for m in sorted(matrices, key=lambda m: (m.date, m.slot)):
            for (o, d), trips in sorted(m.trips.items()):
                writer.writerow([m.date.isoformat(), m.slot, o, d, trips])


def read_transitions(
    path: "str | Path", antenna_map_path: "str | Path"
) -> TransitionLog:
    """Device antenna events plus the antenna map; events sorted per device."""
    antenna_map: dict[str, tuple[str, float, float]] = {}
    for lineno, row in _open_rows(antenna_map_path, "antennas"):
        antenna_id, commune_id = row[0].strip(), row[1].strip()
        if antenna_id in antenna_map:
            raise DuplicateKeyError(
                antenna_map_path, lineno, f"duplicate antenna id {antenna_id!r}"
            )
        lat = _parse_float(antenna_map_path, lineno, row[2], "lat")
        lon = _parse_float(antenna_map_path, lineno, row[3], "lon")
        antenna_map[antenna_id] = (commune_id, lat, lon)

    events: list[TransitionEvent] = []
    for lineno, row in _open_rows(path, "transitions"):
        device = row[0].strip()
        try:
            ts = datetime.fromisoformat(row[1].strip())
        except ValueError:
            raise SchemaError(path, lineno, f"invalid timestamp {row[1]!r}") from None
        antenna_id = row[2].strip()
        if antenna_id not in antenna_map:
            raise SchemaError(path, lineno, f"unmapped antenna {antenna_id!r}")
        events.append(TransitionEvent(device, ts, antenna_id))
    return TransitionLog(tuple(events), antenna_map)


def write_transitions(
    path: "str | Path", antenna_map_path: "str | Path", log: TransitionLog
) -> None:
    with open(antenna_map_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(HEADERS["antennas"])
        for antenna_id, (commune_id, lat, lon) in sorted(log.antenna_map.items()):
            writer.writerow([antenna_id, commune_id, repr(lat), repr(lon)])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(HEADERS["transitions"])
        for ev in log.events:
            writer.writerow([ev.device, ev.timestamp.isoformat(), ev.antenna_id])


def read_cases(
    path: "str | Path", date_index: "DateIndex | None" = None
) -> dict[str, PanelSeries]:
    """Cumulative case series per commune, repaired to be non-decreasing.

    Decreasing rows are repaired by running maximum and logged. When
    ``date_index`` is None it is inferred as the [min, max] date span.
    """
    raw: dict[str, dict[Date, float]] = {}
    for lineno, row in _open_rows(path, "cases"):
        day = _parse_date(path, lineno, row[0])
        commune_id = row[1].strip()
        value = _parse_float(path, lineno, row[2], "cum_cases")
        if value < 0:
            raise SchemaError(path, lineno, f"negative cum_cases {value}")
        per = raw.setdefault(commune_id, {})
        if day in per:
            raise DuplicateKeyError(
                path, lineno, f"duplicate (date, commune) ({day}, {commune_id})"
            )
        per[day] = value

    if date_index is None:
        all_days = [d for per in raw.values() for d in per]
        if not all_days:
            raise SchemaError(path, 1, "no case rows to infer a date index from")
        start = min(all_days)
        date_index = DateIndex(start, (max(all_days) - start).days + 1)

    series: dict[str, PanelSeries] = {}
    for commune_id, per in sorted(raw.items()):
        values = np.full(date_index.n_days, np.nan)
        missing = np.ones(date_index.n_days, dtype=bool)
        for day, value in per.items():
            off = date_index.offset(day)
            values[off] = value
            missing[off] = False
        present = np.flatnonzero(~missing)
        running = -np.inf
        repaired = 0
        for off in present:
            if values[off] < running:
                values[off] = running
                repaired += 1
            running = values[off]
        if repaired:
            logger.warning(
                "cases for commune %s: repaired %d decreasing value(s) by "
                "running maximum",
                commune_id,
                repaired,
            )
        series[commune_id] = PanelSeries(
            commune_id, Variable.CUM_CASES, values, missing
        )
    return series


def write_cases(path: "str | Path", series: dict[str, PanelSeries],
                date_index: DateIndex) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(HEADERS["cases"])
        for commune_id in sorted(series):
            s = series[commune_id]
            for off in range(len(s)):
                if not s.missing[off]:
                    writer.writerow(
                        [date_index.date_at(off).isoformat(), commune_id,
                         int(round(s.values[off]))]
                    )


def read_socio(path: "str | Path") -> dict[str, Commune]:
    """Commune covariate table keyed by commune id."""
    communes: dict[str, Commune] = {}
    for lineno, row in _open_rows(path, "socio"):
        commune_id = row[0].strip()
        if commune_id in communes:
            raise DuplicateKeyError(path, lineno, f"duplicate commune {commune_id!r}")
        name = row[1].strip()
        population = _parse_int(path, lineno, row[2], "population", minimum=1)
        if not row[3].strip():
            raise SchemaError(path, lineno, "missing income_index")
        income = _parse_float(path, lineno, row[3], "income_index")
        rural_text = row[4].strip().lower()
        if rural_text not in ("true", "false"):
            raise SchemaError(path, lineno, f"is_rural must be true/false, got {row[4]!r}")
        communes[commune_id] = Commune(
            commune_id, name, population, income, rural_text == "true"
        )
    return communes


def write_socio(path: "str | Path", communes: dict[str, Commune]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(HEADERS["socio"])
        for cid in sorted(communes):
            c = communes[cid]
            writer.writerow(
                [c.id, c.name, c.population, repr(c.income_index),
                 "true" if c.is_rural else "false"]
            )


def read_schedule(path: "str | Path", date_index: DateIndex) -> InterventionSchedule:
    """Confinement timeline with dates converted to day offsets.

    Offsets may fall outside [0, n_days); consumers window them as needed.
    """
    entries: list[ScheduleEntry] = []
    for lineno, row in _open_rows(path, "schedule"):
        commune_id = row[0].strip()
        start = _parse_date(path, lineno, row[1])
        end_text = row[2].strip()
        end = _parse_date(path, lineno, end_text) if end_text else None
        kind = row[3].strip()
        try:
            entry = ScheduleEntry(
                commune_id,
                (start - date_index.start).days,
                (end - date_index.start).days if end is not None else None,
                kind,
            )
        except ValueError as exc:
            raise SchemaError(path, lineno, str(exc)) from None
        entries.append(entry)
    return InterventionSchedule(tuple(entries))


def write_schedule(
    path: "str | Path", schedule: InterventionSchedule, date_index: DateIndex
) -> None:
    from datetime import timedelta

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(HEADERS["schedule"])
        for e in sorted(
            schedule.entries, key=lambda e: (e.commune_id, str(e.kind), e.start_day)
        ):
            start = date_index.start + timedelta(days=e.start_day)
            end = (
                ""
                if e.end_day is None
                else (date_index.start + timedelta(days=e.end_day)).isoformat()
            )
            writer.writerow([e.commune_id, start.isoformat(), end, str(e.kind)])


def infer_date_index(cases_path: "str | Path") -> DateIndex:
    """The [min, max] date span found in a cases file."""
    lo: "Date | None" = None
    hi: "Date | None" = None
    for lineno, row in _open_rows(cases_path, "cases"):
        day = _parse_date(cases_path, lineno, row[0])
        lo = day if lo is None or day < lo else lo
        hi = day if hi is None or day > hi else hi
    if lo is None or hi is None:
        raise SchemaError(cases_path, 1, "no case rows to infer a date index from")
    return DateIndex(lo, (hi - lo).days + 1)


def load_region(
    socio_path: "str | Path",
    cases_path: "str | Path",
    schedule_path: "str | Path",
    date_index: "DateIndex | None" = None,
) -> "StudyRegion":
    """Assemble a StudyRegion from the three commune-level input files."""
    from .core import StudyRegion, add_case_derivatives

    communes = read_socio(socio_path)
    if date_index is None:
        date_index = infer_date_index(cases_path)
    cases = read_cases(cases_path, date_index)
    schedule = read_schedule(schedule_path, date_index)
    panels = {}
    for commune_id, series in cases.items():
        if commune_id not in communes:
            raise SchemaError(cases_path, 1, f"cases for unknown commune {commune_id!r}")
        panels[(commune_id, Variable.CUM_CASES.value)] = series
    region = StudyRegion(communes, date_index, panels, schedule)
    return add_case_derivatives(region)
