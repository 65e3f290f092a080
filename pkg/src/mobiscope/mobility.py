"""Mobility analytics: percentile scores, transition indices, OD aggregation.

Three independent data products live here:

- hexagon displacement counts -> daily percentile scores -> commune scores
  (communes average their hexagons' scores, unweighted);
- device antenna-transition logs -> per-commune MobIn / MobOut daily counts
  and the combined, study-normalized mobility index;
- origin-destination matrices -> per-capita flows into a high-risk set of
  communes, and the directed commune graph.
"""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import dataclass
from datetime import date as Date
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import DateIndex, ODMatrix, PanelSeries, TransitionLog, Variable
from .ingest import HexScoreRecord

logger = logging.getLogger("mobiscope.mobility")

__all__ = [
    "MORNING_SLOTS",
    "HexScoreGrid",
    "score_hexagons",
    "commune_score",
    "commune_score_panel",
    "mobility_indices",
    "mobility_index_panels",
    "FlowVector",
    "flow_vector",
    "risk_set",
    "od_graph",
    "write_od_graph",
]

#: Half-hour slots covering the default morning commute window [06:00, 08:00).
MORNING_SLOTS = ("06:00", "06:30", "07:00", "07:30")


@dataclass(frozen=True)
class HexScoreGrid:
    """Daily percentile scores per hexagon plus the hexagon-commune map.

    ``scores[t, j]`` is the percentile score of hexagon ``hex_ids[j]`` on day
    ``t`` (NaN when that hexagon did not report); scores on a date are a
    monotone function of that date's raw counts. Each hexagon belongs to
    exactly one commune.
    """

    date_index: DateIndex
    hex_ids: tuple[str, ...]
    commune_of: dict[str, str]
    scores: np.ndarray
    present: np.ndarray

    def hexes_of(self, commune_id: str) -> list[str]:
        return [h for h in self.hex_ids if self.commune_of[h] == commune_id]

    def communes(self) -> list[str]:
        return sorted(set(self.commune_of.values()))


def score_hexagons(
    records: Sequence[HexScoreRecord], date_index: "DateIndex | None" = None
) -> HexScoreGrid:
    """Convert raw displacement counts into daily percentile scores.

    On each date, score(h) = 100 * #{hexes g reporting that date with
    count(g) <= count(h)} / N, where N is the number of hexes reporting.
    Ties share the maximal value (an empirical CDF with <=), every score
    lies in {100*r/N : r = 1..N}, and any strictly monotone transform of
    the counts leaves the scores unchanged. Dates with no reporting hexagon
    are skipped with a warning.
    """
    if not records:
        raise ValueError("no hexagon displacement records")
    if date_index is None:
        lo = min(r.date for r in records)
        hi = max(r.date for r in records)
        date_index = DateIndex(lo, (hi - lo).days + 1)
    hex_ids = tuple(sorted({r.hex_id for r in records}))
    col = {h: j for j, h in enumerate(hex_ids)}
    commune_of: dict[str, str] = {}
    counts = np.zeros((date_index.n_days, len(hex_ids)))
    present = np.zeros(counts.shape, dtype=bool)
    for r in records:
        if r.displacements < 0:
            raise ValueError(f"negative count for hexagon {r.hex_id!r}")
        t = date_index.offset(r.date)
        j = col[r.hex_id]
        previous = commune_of.setdefault(r.hex_id, r.commune_id)
        if previous != r.commune_id:
            raise ValueError(f"hexagon {r.hex_id!r} assigned to two communes")
        counts[t, j] = r.displacements
        present[t, j] = True

    scores = np.full(counts.shape, np.nan)
    for t in range(date_index.n_days):
        mask = present[t]
        n_t = int(mask.sum())
        if n_t == 0:
            logger.warning(
                "no hexagons reported on %s; date skipped", date_index.date_at(t)
            )
            continue
        vals = counts[t, mask]
        sorted_vals = np.sort(vals)
        # rank = number of counts <= own count (1-based by construction)
        rank = np.searchsorted(sorted_vals, vals, side="right")
        scores[t, mask] = 100.0 * rank / n_t
    scores.setflags(write=False)
    present.setflags(write=False)
    return HexScoreGrid(date_index, hex_ids, commune_of, scores, present)


def commune_score(grid: HexScoreGrid, commune_id: str) -> PanelSeries:
    """Daily commune score: unweighted mean of its hexagons' scores.

    Days where none of the commune's hexagons report are missing. A commune
    with no assigned hexagons is a configuration error.
    """
    cols = [j for j, h in enumerate(grid.hex_ids) if grid.commune_of[h] == commune_id]
    if not cols:
        raise ValueError(f"commune {commune_id!r} has no assigned hexagons")
    block = grid.scores[:, cols]
    n_days = grid.date_index.n_days
    vals = np.full(n_days, np.nan)
    miss = np.ones(n_days, dtype=bool)
    for t in range(n_days):
        row = block[t]
        row = row[~np.isnan(row)]
        if row.size:
            vals[t] = row.mean()
            miss[t] = False
    return PanelSeries(commune_id, Variable.SCORE, vals, miss)


def commune_score_panel(grid: HexScoreGrid) -> dict[str, PanelSeries]:
    """commune_score for every commune in the grid, keyed by commune id."""
    return {c: commune_score(grid, c) for c in grid.communes()}


def mobility_indices(
    log: TransitionLog, date_index: DateIndex
) -> tuple[dict[str, PanelSeries], dict[str, PanelSeries]]:
    """Daily MobIn / MobOut transition counts per commune.

    A transition is a pair of consecutive events of one device at different
    antennas, dated by the later event. Both antennas in commune X ->
    MobIn(X) += 1; from X to a different commune Y -> MobOut(X) += 1 (origin
    attribution; nothing is credited to Y), so summing MobIn + MobOut over
    communes recounts each in-window transition exactly once.

    Events dated outside the index are ignored. Communes that appear in the
    antenna map but never in a transition get all-zero series.
    """
    communes = sorted({c for c, _, _ in log.antenna_map.values()})
    idx = {c: i for i, c in enumerate(communes)}
    n_days = date_index.n_days
    mob_in = np.zeros((n_days, len(communes)))
    mob_out = np.zeros((n_days, len(communes)))

    events = log.events
    for k in range(1, len(events)):
        prev, cur = events[k - 1], events[k]
        if prev.device != cur.device or prev.antenna_id == cur.antenna_id:
            continue
        t = (cur.timestamp.date() - date_index.start).days
        if not 0 <= t < n_days:
            continue
        c_from = log.commune_of(prev.antenna_id)
        c_to = log.commune_of(cur.antenna_id)
        if c_from == c_to:
            mob_in[t, idx[c_from]] += 1.0
        else:
            mob_out[t, idx[c_from]] += 1.0

    none_missing = np.zeros(n_days, dtype=bool)
    in_series = {
        c: PanelSeries(c, Variable.MOB_IN, mob_in[:, idx[c]], none_missing)
        for c in communes
    }
    out_series = {
        c: PanelSeries(c, Variable.MOB_OUT, mob_out[:, idx[c]], none_missing)
        for c in communes
    }
    return in_series, out_series


def mobility_index_panels(
    mob_in: Mapping[str, PanelSeries],
    mob_out: Mapping[str, PanelSeries],
    constant: "float | None" = None,
) -> tuple[dict[str, PanelSeries], float]:
    """Combined mobility index: (MobIn + MobOut) / study-wide constant.

    The default constant is the panel-wide mean of the daily combined counts
    over all commune-days, making the index dimensionless with overall mean 1.
    Returns the panels and the constant actually used.
    """
    if set(mob_in) != set(mob_out):
        raise ValueError("mob_in and mob_out cover different communes")
    communes = sorted(mob_in)
    if not communes:
        raise ValueError("no communes")
    combined = {c: mob_in[c].values + mob_out[c].values for c in communes}
    if constant is None:
        total = float(sum(arr.sum() for arr in combined.values()))
        n_cells = sum(arr.size for arr in combined.values())
        constant = total / n_cells if n_cells else 1.0
    if constant <= 0:
        constant = 1.0
    panels = {
        c: PanelSeries(
            c,
            Variable.MOBILITY_INDEX,
            combined[c] / constant,
            np.zeros(len(combined[c]), dtype=bool),
        )
        for c in communes
    }
    return panels, float(constant)


@dataclass(frozen=True)
class FlowVector:
    """Per-capita trips into the high-risk set over a date window.

    ``flows[i]`` is the summed trip count from commune ``i`` into any
    risk-set member over the window and slots, divided by ``i``'s
    population; members of the risk set have flow 0 by convention.
    """

    flows: dict[str, float]
    risk_set: frozenset[str]
    window: tuple[Date, Date]
    slots: tuple[str, ...]

    def __post_init__(self) -> None:
        for cid, value in self.flows.items():
            if value < 0:
                raise ValueError(f"negative flow for {cid!r}")
        if not self.risk_set:
            raise ValueError("risk set must be non-empty")
        for cid in self.risk_set:
            if self.flows.get(cid, 0.0) != 0.0:
                raise ValueError(f"risk-set member {cid!r} must have flow 0")


def flow_vector(
    matrices: Sequence[ODMatrix],
    risk: "frozenset[str] | set[str]",
    window: tuple[Date, Date],
    populations: Mapping[str, int],
    slots: Sequence[str] = MORNING_SLOTS,
) -> FlowVector:
    """Flow covariate: per-capita morning trips into the high-risk communes.

    ``window`` is an inclusive date interval (first day, last day). For each
    commune ``i`` outside the risk set,
    Flow_i = sum over window dates, slots, destinations d in the risk set of
    trips(i -> d) / population_i; risk-set members get 0.
    """
    first, last = window
    if last < first:
        raise ValueError(f"empty date window [{first}, {last}]")
    if not risk:
        raise ValueError("risk set must be non-empty")
    for cid, pop in populations.items():
        if pop <= 0:
            raise ValueError(f"population of {cid!r} must be positive")
    risk = frozenset(risk)
    wanted_slots = set(slots)
    totals: dict[str, float] = defaultdict(float)
    for m in matrices:
        if not (first <= m.date <= last) or m.slot not in wanted_slots:
            continue
        for (o, d), trips in m.trips.items():
            if d in risk and o not in risk:
                totals[o] += trips
    flows = {
        cid: (0.0 if cid in risk else totals.get(cid, 0.0) / populations[cid])
        for cid in populations
    }
    return FlowVector(flows, risk, (first, last), tuple(slots))


def risk_set(rates: Mapping[str, float], k: int) -> frozenset[str]:
    """Top-k communes by case rate; ties broken by commune id ascending."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ranked = sorted(rates.items(), key=lambda kv: (-kv[1], kv[0]))
    return frozenset(cid for cid, _ in ranked[:k])


def od_graph(
    matrices: Sequence[ODMatrix],
    window: "tuple[Date, Date] | None" = None,
    slots: "Sequence[str] | None" = None,
) -> tuple[dict[str, float], dict[tuple[str, str], float]]:
    """Aggregate OD matrices into a directed weighted commune graph.

    Returns ``(nodes, edges)``: ``edges[(o, d)]`` is the summed trip count
    over the selection (pairs summing to zero are dropped); ``nodes[c]`` is
    the weighted out-degree of ``c`` (sum over destinations, self-loops
    included; 0 for communes that only receive trips). Total edge weight
    equals the total selected trips.
    """
    selected = []
    for m in matrices:
        if window is not None and not (window[0] <= m.date <= window[1]):
            continue
        if slots is not None and m.slot not in set(slots):
            continue
        selected.append(m)
    if not selected:
        raise ValueError("no OD matrices in the selected window/slots")
    edges: dict[tuple[str, str], float] = defaultdict(float)
    for m in selected:
        for pair, trips in m.trips.items():
            edges[pair] += float(trips)
    edges = {pair: w for pair, w in edges.items() if w > 0}
    nodes: dict[str, float] = {}
    for (o, d), w in edges.items():
        nodes[o] = nodes.get(o, 0.0) + w
        nodes.setdefault(d, 0.0)
    return dict(sorted(nodes.items())), dict(sorted(edges.items()))


def write_od_graph(
    out_dir: "str | Path",
    nodes: Mapping[str, float],
    edges: Mapping[tuple[str, str], float],
) -> tuple[Path, Path]:
    """Write ``nodes.csv`` (commune_id,outdeg) and ``edges.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    nodes_path = out / "nodes.csv"
    edges_path = out / "edges.csv"
    with open(nodes_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["commune_id", "outdeg"])
        for c, s in sorted(nodes.items()):
            writer.writerow([c, f"{s:.6f}"])
    with open(edges_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["origin", "destination", "weight"])
        for (o, d), w in sorted(edges.items()):
            writer.writerow([o, d, f"{w:.6f}"])
    return nodes_path, edges_path
