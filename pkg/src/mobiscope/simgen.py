"""Synthetic-city generator with planted ground truth.

A configurable city of communes is simulated end to end:

- four commune archetypes (rural / low / mid / high) set populations,
  incomes, commute shares, activity levels, and the percentile band their
  mobility scores live in — the archetype labels are the planted clustering
  ground truth;
- a deterministic discrete-day metapopulation SEIR epidemic couples
  communes through a commute matrix; infections are seeded in the
  top-income communes and spread outward along commuting routes;
- an intervention schedule (staggered lockdowns, later reopenings) scales
  mobility, with compliance increasing in income;
- observable files are emitted in every ingestion schema: hexagon
  displacement counts, OD matrices, antenna transition logs, cumulative
  cases with additive reporting noise, the socioeconomic table, and the
  schedule, plus ``ground_truth.json``.

Design guarantees: compartments are conserved exactly (R is derived as
N - S - E - I), reported cumulative cases are non-decreasing (running
maximum after noise), identical seeds give byte-identical files, and the
observation noise stream is independent of the epidemic parameters so that
raising the transmission rate with a fixed seed reuses the same draws.

A lifting plan plants a causal effect for the synthetic-control estimator:
the cohort's emitted cases equal the simulated no-lifting counterfactual
plus an additive shift of ``delta`` daily cases per 100k from the lifting
day onward (exactly, before noise), while the cohort's *mobility* streams
reopen on that day. Same-archetype non-cohort communes have their reopening
pushed past the evaluation window so clean donors always exist.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from datetime import date as Date, datetime, time, timedelta
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (
    Commune,
    DateIndex,
    InterventionKind,
    InterventionSchedule,
    ODMatrix,
    PanelSeries,
    ScheduleEntry,
    StudyRegion,
    TransitionEvent,
    TransitionLog,
    Variable,
    add_case_derivatives,
)
from .ingest import (
    HexScoreRecord,
    write_cases,
    write_hex_scores,
    write_od,
    write_schedule,
    write_socio,
    write_transitions,
)
from .mobility import (
    commune_score_panel,
    flow_vector,
    mobility_index_panels,
    risk_set,
    score_hexagons,
)

__all__ = [
    "ArchetypeSpec",
    "EpidemicParams",
    "InterventionPolicy",
    "NoiseParams",
    "LiftingPlan",
    "RegressionPlan",
    "CityConfig",
    "GroundTruth",
    "SimResult",
    "simulate",
    "generate",
    "plant_lifting_effect",
    "as_region",
    "od_matrices",
    "cross_section",
    "DEFAULT_ARCHETYPES",
    "SIM_SLOTS",
]

#: Half-hour slots the generator populates: morning commute out, evening back.
SIM_SLOTS = ("06:00", "06:30", "07:00", "07:30", "17:00", "17:30")
_MORNING = (0, 1, 2, 3)
_EVENING = (4, 5)
_SLOT_SHARE = (0.20, 0.26, 0.26, 0.20, 0.05, 0.03)


@dataclass(frozen=True)
class ArchetypeSpec:
    """One commune class: size, wealth, mobility level, intervention timing."""

    name: str
    n: int
    income: tuple[float, float]
    population: tuple[int, int]
    commute_share: tuple[float, float]
    trip_rate: float
    is_rural: bool = False
    lock_day: "int | None" = None
    phase2_day: "int | None" = None

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError(f"archetype {self.name!r} needs n >= 1")
        lo, hi = self.commute_share
        if not (0.0 <= lo <= hi < 1.0):
            raise ValueError("commute share must stay inside [0, 1)")
        if self.trip_rate <= 0:
            raise ValueError("trip rate must be positive")


DEFAULT_ARCHETYPES = (
    ArchetypeSpec("rural", 10, (0.10, 0.30), (8_000, 30_000), (0.04, 0.10),
                  6.0, is_rural=True),
    ArchetypeSpec("low", 14, (0.25, 0.45), (90_000, 250_000), (0.24, 0.38),
                  14.0, lock_day=45, phase2_day=190),
    ArchetypeSpec("mid", 14, (0.45, 0.68), (60_000, 180_000), (0.20, 0.34),
                  20.0, lock_day=35, phase2_day=205),
    ArchetypeSpec("high", 14, (0.74, 0.98), (40_000, 130_000), (0.12, 0.24),
                  28.0, lock_day=25, phase2_day=148),
)


@dataclass(frozen=True)
class EpidemicParams:
    """Transmission, incubation-exit, and recovery rates (1/day)."""

    beta: float = 0.35
    sigma: float = 1.0 / 5.2
    gamma: float = 0.10

    def __post_init__(self) -> None:
        for name in ("beta", "sigma", "gamma"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")


@dataclass(frozen=True)
class InterventionPolicy:
    """Mobility reduction per confinement kind, modulated by compliance.

    An active kind with reduction r leaves a commune with openness
    1 - r * compliance, where compliance = floor + slope * income_index
    (clipped to [0, 1]); reopened communes return to openness 1.
    """

    partial_reduction: float = 0.35
    total_reduction: float = 0.60
    compliance_floor: float = 0.30
    compliance_slope: float = 0.65

    def __post_init__(self) -> None:
        for name in ("partial_reduction", "total_reduction"):
            r = getattr(self, name)
            if not 0.0 < r <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1]")

    def compliance(self, income: float) -> float:
        return float(np.clip(self.compliance_floor
                             + self.compliance_slope * income, 0.0, 1.0))


@dataclass(frozen=True)
class NoiseParams:
    """Observation-layer knobs; the epidemic itself is deterministic."""

    report_rate: float = 0.55
    case_noise: float = 0.5
    hex_jitter: float = 0.035

    def __post_init__(self) -> None:
        if not 0.0 < self.report_rate <= 1.0:
            raise ValueError("report_rate must lie in (0, 1]")
        if self.case_noise < 0 or self.hex_jitter < 0:
            raise ValueError("noise scales must be non-negative")


@dataclass(frozen=True)
class LiftingPlan:
    """Planted reopening effect: +delta daily cases per 100k from ``day``."""

    cohort: tuple[str, ...]
    day: int
    delta: float = 20.0
    donor_hold_days: int = 40

    def __post_init__(self) -> None:
        if not self.cohort:
            raise ValueError("cohort must be non-empty")
        if self.day < 1:
            raise ValueError("lifting day must be >= 1")
        if self.donor_hold_days < 1:
            raise ValueError("donor hold must be >= 1 day")


@dataclass(frozen=True)
class RegressionPlan:
    """Coefficients used to synthesize regression cross-sections."""

    beta: tuple[float, ...] = (-150.0, 50.0, 8.0, 40.0, 1.5, -6.0)
    noise_sd: float = 25.0

    def __post_init__(self) -> None:
        if len(self.beta) != 6:
            raise ValueError("expected 6 coefficients (intercept + 5 slopes)")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be non-negative")


@dataclass(frozen=True)
class CityConfig:
    """Everything the generator needs; fully determines the output files."""

    n_days: int = 249
    start_date: Date = Date(2020, 3, 1)
    archetypes: tuple[ArchetypeSpec, ...] = DEFAULT_ARCHETYPES
    epidemic: EpidemicParams = EpidemicParams()
    policy: InterventionPolicy = InterventionPolicy()
    noise: NoiseParams = NoiseParams()
    #: the epidemic starts in the richest communes: the top ``seed_communes``
    #: by income each get ``seed_size`` initial exposures per 100k residents
    seed_communes: int = 5
    seed_size: float = 30.0
    hexes_per_commune: int = 4
    antennas_per_commune: int = 3
    od_scale: float = 0.12
    weekend_factor: float = 0.72
    lifting: "LiftingPlan | None" = None
    regression: RegressionPlan = RegressionPlan()
    seed: int = 7

    def __post_init__(self) -> None:
        if self.n_days < 30:
            raise ValueError("n_days must be >= 30")
        if self.seed_communes < 1 or self.seed_size <= 0:
            raise ValueError("seeding requires >= 1 commune and positive size")
        if self.hexes_per_commune < 1 or self.antennas_per_commune < 2:
            raise ValueError("need >= 1 hexagon and >= 2 antennas per commune")
        if not 0 < self.od_scale <= 1 or not 0 < self.weekend_factor <= 1:
            raise ValueError("od_scale and weekend_factor must lie in (0, 1]")

    @property
    def n_communes(self) -> int:
        return sum(a.n for a in self.archetypes)


def plant_lifting_effect(
    config: CityConfig,
    cohort: "Sequence[str] | None" = None,
    day: "int | None" = None,
    delta: float = 20.0,
    donor_hold_days: int = 40,
) -> CityConfig:
    """Plant a reopening effect of ``delta`` daily cases per 100k.

    Defaults: the first six communes of the third archetype as the cohort,
    reopening at that archetype's scheduled day. Same-archetype communes
    outside the cohort reopen ``donor_hold_days`` later so the synthetic
    control always has clean donors.
    """
    ids = _commune_ids(config)
    if cohort is None:
        arch = config.archetypes[min(2, len(config.archetypes) - 1)]
        members = [cid for cid, a in _archetype_of(config).items()
                   if a == arch.name]
        cohort = tuple(members[:6]) if len(members) >= 6 else tuple(members)
        if day is None:
            day = arch.phase2_day
    unknown = set(cohort) - set(ids)
    if unknown:
        raise ValueError(f"unknown cohort communes: {sorted(unknown)}")
    if day is None:
        raise ValueError("a lifting day is required")
    plan = LiftingPlan(tuple(cohort), int(day), float(delta),
                       int(donor_hold_days))
    return dataclasses.replace(config, lifting=plan)


def _commune_ids(config: CityConfig) -> list[str]:
    return [f"c{k:02d}" for k in range(1, config.n_communes + 1)]


def _archetype_of(config: CityConfig) -> dict[str, str]:
    out: dict[str, str] = {}
    k = 1
    for spec in config.archetypes:
        for _ in range(spec.n):
            out[f"c{k:02d}"] = spec.name
            k += 1
    return out


@dataclass(frozen=True)
class GroundTruth:
    """Everything planted: labels, coefficients, effect, latent states."""

    labels: dict[str, str]
    coefficients: tuple[float, ...]
    regression_noise_sd: float
    delta: "float | None"
    cohort: tuple[str, ...]
    lifting_day: "int | None"
    report_rate: float
    seed: int
    trajectories: dict[str, dict[str, list[float]]]

    def to_json(self) -> str:
        payload = dataclasses.asdict(self)
        payload["cohort"] = list(self.cohort)
        payload["coefficients"] = list(self.coefficients)
        return json.dumps(payload, sort_keys=True, indent=2)


@dataclass(frozen=True)
class SimResult:
    """In-memory simulation output; file emission is a separate step."""

    config: CityConfig
    date_index: DateIndex
    commune_ids: tuple[str, ...]
    communes: dict[str, Commune]
    labels: dict[str, str]
    commute_share: np.ndarray
    commute_dist: np.ndarray
    open_epi: np.ndarray
    open_mob: np.ndarray
    S: np.ndarray
    E: np.ndarray
    I: np.ndarray
    R: np.ndarray
    counterfactual_cum: np.ndarray
    reported_float: np.ndarray
    emitted_cum: np.ndarray
    hex_ids: tuple[str, ...]
    hex_commune: dict[str, str]
    hex_counts: np.ndarray
    in_counts: np.ndarray
    out_counts: np.ndarray
    od_edges: tuple[tuple[int, int], ...]
    od_counts: np.ndarray
    schedule: InterventionSchedule
    ground_truth: GroundTruth


def _build_layout(config: CityConfig, rng: np.random.Generator):
    """Populations, incomes, commute structure, hex latent bases."""
    ids = _commune_ids(config)
    labels = _archetype_of(config)
    spec_of = {a.name: a for a in config.archetypes}
    n = len(ids)

    populations = np.empty(n, dtype=int)
    incomes = np.empty(n)
    m = np.empty(n)
    trip_rates = np.empty(n)
    for i, cid in enumerate(ids):
        spec = spec_of[labels[cid]]
        populations[i] = int(rng.integers(spec.population[0],
                                          spec.population[1] + 1))
        incomes[i] = rng.uniform(*spec.income)
        m[i] = rng.uniform(*spec.commute_share)
        trip_rates[i] = spec.trip_rate

    communes = {
        cid: Commune(cid, f"Commune {cid[1:]}", int(populations[i]),
                     round(float(incomes[i]), 4),
                     spec_of[labels[cid]].is_rural)
        for i, cid in enumerate(ids)
    }

    # employment hubs: the three richest communes attract commuters
    hubs = list(np.argsort(-incomes)[:3])
    c = np.zeros((n, n))
    for i in range(n):
        dests = {}
        hub_pair = rng.choice(hubs, size=2, replace=False)
        for h in hub_pair:
            if h != i:
                dests[int(h)] = dests.get(int(h), 0.0) + 0.35
        same = [j for j in range(n) if j != i and labels[ids[j]] == labels[ids[i]]]
        if same:
            buddy = int(rng.choice(same))
            dests[buddy] = dests.get(buddy, 0.0) + 0.20
        other = int(rng.integers(0, n))
        if other != i:
            dests[other] = dests.get(other, 0.0) + 0.10
        total = sum(dests.values())
        for j, share in dests.items():
            c[i, j] = share / total

    # hexagon latent magnitudes: archetype blocks of interleaved ranks, so
    # every commune's hexes average to (approximately) its block's center
    # percentile while within-archetype spread stays far below the gaps
    # between archetypes.
    H = config.hexes_per_commune
    hex_ids = []
    hex_commune = {}
    base = np.empty(n * H)
    rank = 0
    for spec in config.archetypes:
        members = [i for i, cid in enumerate(ids) if labels[cid] == spec.name]
        for slot in range(H):
            for i in members:
                hex_ids.append(f"hex{i:02d}{slot}")
                hex_commune[hex_ids[-1]] = ids[i]
                base[rank] = 60.0 * (1.035 ** rank)
                rank += 1
    return (ids, labels, communes, populations.astype(float), incomes, m,
            trip_rates, c, hex_ids, hex_commune, base)


def _build_schedules(
    config: CityConfig, ids: list[str], labels: dict[str, str]
) -> tuple[InterventionSchedule, dict[str, "int | None"], dict[str, "int | None"]]:
    """The emitted schedule plus per-commune lockdown/reopen days.

    Returns (schedule, phase2_mob, phase2_epi): the mobility timeline uses
    the factual reopening days; the epidemic timeline removes the cohort's
    reopening entirely (its cases are the no-lifting counterfactual).
    """
    spec_of = {a.name: a for a in config.archetypes}
    plan = config.lifting
    phase2_mob: dict[str, "int | None"] = {}
    lock: dict[str, "int | None"] = {}
    for cid in ids:
        spec = spec_of[labels[cid]]
        lock[cid] = spec.lock_day
        day = spec.phase2_day
        if plan is not None and cid in plan.cohort:
            day = plan.day
        elif (
            plan is not None
            and day is not None
            # a reopening near the planted one would shock the evaluation
            # window (directly for donors, via commuting for everyone), so
            # defer it until the effect window has closed
            and plan.day - plan.donor_hold_days <= day
            < plan.day + plan.donor_hold_days
        ):
            day = plan.day + plan.donor_hold_days
        phase2_mob[cid] = day

    entries = []
    for cid in ids:
        start = lock[cid]
        if start is None:
            continue
        p2 = phase2_mob[cid]
        total_start = start + 21
        if p2 is not None and p2 <= total_start:
            raise ValueError(
                f"reopening day {p2} for {cid} falls before the "
                f"total-lockdown start {total_start}"
            )
        entries.append(ScheduleEntry(cid, start, total_start,
                                     InterventionKind.PARTIAL_LOCKDOWN))
        entries.append(ScheduleEntry(cid, total_start, p2,
                                     InterventionKind.TOTAL_LOCKDOWN))
        if p2 is not None:
            entries.append(ScheduleEntry(cid, p2, None,
                                         InterventionKind.PHASE2_TRANSITION))
    schedule = InterventionSchedule(tuple(entries))

    phase2_epi = dict(phase2_mob)
    if plan is not None:
        for cid in plan.cohort:
            phase2_epi[cid] = None  # counterfactual: cohort stays confined
    return schedule, phase2_mob, phase2_epi


def _openness(
    config: CityConfig,
    ids: list[str],
    labels: dict[str, str],
    incomes: np.ndarray,
    phase2: dict[str, "int | None"],
) -> np.ndarray:
    """Daily openness factor per commune in (0, 1]."""
    spec_of = {a.name: a for a in config.archetypes}
    pol = config.policy
    n_days = config.n_days
    out = np.ones((n_days, len(ids)))
    for i, cid in enumerate(ids):
        spec = spec_of[labels[cid]]
        if spec.lock_day is None:
            continue
        comp = pol.compliance(float(incomes[i]))
        start = spec.lock_day
        total_start = min(start + 21, n_days)
        p2 = phase2[cid]
        end = n_days if p2 is None else min(p2, n_days)
        a = min(start, n_days)
        out[a:total_start, i] = 1.0 - pol.partial_reduction * comp
        if total_start < end:
            out[total_start:end, i] = 1.0 - pol.total_reduction * comp
    return out


_GRID = 2.0 ** 20


def _quantize(x: np.ndarray) -> np.ndarray:
    """Floor onto the 2**-20 person grid.

    Compartments kept on a dyadic grid (and bounded by the largest commune,
    far below 2**53 / grid) make every sum and difference exact in double
    precision, so S+E+I+R == N holds bitwise in any evaluation order;
    flooring (never rounding up) keeps S+E+I <= N, hence R >= 0.
    """
    return np.floor(x * _GRID) / _GRID


def _seir(
    config: CityConfig,
    populations: np.ndarray,
    incomes: np.ndarray,
    m: np.ndarray,
    c: np.ndarray,
    open_epi: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Deterministic metapopulation SEIR; R derived so S+E+I+R == N exactly."""
    ep = config.epidemic
    n_days = config.n_days
    n = populations.size
    N = populations
    seeds = np.argsort(-incomes)[: config.seed_communes]
    E = np.zeros(n)
    for i in seeds:
        planted = min(config.seed_size * N[i] / 100_000.0, N[i] - 1.0)
        E[i] = _quantize(np.array(planted))[()]
    S = N - E
    I = np.zeros(n)

    S_traj = np.empty((n_days, n))
    E_traj = np.empty((n_days, n))
    I_traj = np.empty((n_days, n))
    R_traj = np.empty((n_days, n))
    for t in range(n_days):
        open_t = open_epi[t]
        m_t = m * open_t
        i_frac = I / N
        coupled = c @ (open_t * i_frac)
        lam = ep.beta * open_t * ((1.0 - m_t) * i_frac + m_t * coupled)
        new_e = S * (-np.expm1(-lam))
        new_i = E * (-np.expm1(-ep.sigma))
        new_r = I * (-np.expm1(-ep.gamma))
        S = _quantize(S - new_e)
        # clamping against the exactly-representable remainder keeps
        # S+E+I <= N bitwise even if an upstream rounding nudged a value up
        E = np.minimum(_quantize(E + new_e - new_i), N - S)
        I = np.minimum(_quantize(I + new_i - new_r), N - S - E)
        S_traj[t] = S
        E_traj[t] = E
        I_traj[t] = I
        R_traj[t] = N - S - E - I
    return S_traj, E_traj, I_traj, R_traj


def simulate(config: CityConfig = CityConfig()) -> SimResult:
    """Run the city end to end in memory (no files written).

    Deterministic given ``config.seed``. The observation-noise stream is
    seeded independently of everything the epidemic parameters touch.
    """
    rng = np.random.default_rng([config.seed, 0])
    rng_obs = np.random.default_rng([config.seed, 1])
    (ids, labels, communes, populations, incomes, m, trip_rates, c,
     hex_ids, hex_commune, base) = _build_layout(config, rng)
    n = len(ids)
    n_days = config.n_days
    date_index = DateIndex(config.start_date, n_days)

    schedule, phase2_mob, phase2_epi = _build_schedules(config, ids, labels)
    open_mob = _openness(config, ids, labels, incomes, phase2_mob)
    open_epi = _openness(config, ids, labels, incomes, phase2_epi)

    S, E, I, R = _seir(config, populations, incomes, m, c, open_epi)
    cum_true = populations[None, :] - S  # ever infected
    cum_detected = config.noise.report_rate * cum_true

    # reporting noise perturbs *daily new* detections, then accumulates, so
    # cumulative counts are non-decreasing by construction and a noiseless
    # planted effect survives exactly.
    plan = config.lifting
    delta_daily = np.zeros(n)
    if plan is not None:
        for i, cid in enumerate(ids):
            if cid in plan.cohort:
                delta_daily[i] = plan.delta * populations[i] / 100_000.0
    new_detected = np.diff(cum_detected, axis=0, prepend=np.zeros((1, n)))
    new_shifted = new_detected
    if plan is not None:
        ramp = (np.arange(n_days)[:, None] >= plan.day).astype(float)
        new_shifted = new_detected + ramp * delta_daily[None, :]

    z = rng_obs.standard_normal((n_days, n))
    scale = config.noise.case_noise * np.sqrt(new_shifted + 1.0)
    reported_new = np.maximum(new_shifted + z * scale, 0.0)
    reported_float = np.cumsum(reported_new, axis=0)
    emitted_cum = np.round(reported_float)

    # hexagon displacement counts: fixed latent ladder, small multiplicative
    # jitter, a gentle response to the commune's openness, and a weekday
    # rhythm that cancels out of the (rank-based) percentile scores.
    weekday = np.array(
        [1.0 if (config.start_date + timedelta(days=t)).weekday() < 5
         else config.weekend_factor for t in range(n_days)]
    )
    commune_idx = {cid: i for i, cid in enumerate(ids)}
    hex_open = open_mob[:, [commune_idx[hex_commune[h]] for h in hex_ids]]
    jitter = np.exp(config.noise.hex_jitter
                    * rng.standard_normal((n_days, len(hex_ids))))
    hex_counts = np.maximum(
        np.round(base[None, :] * (hex_open ** 0.25) * jitter
                 * weekday[:, None]),
        1.0,
    ).astype(int)

    # antenna transitions: realized daily counts; event streams are
    # fabricated from these counts at emission time, so the ingestion
    # pipeline reproduces them exactly.
    weekend_mob = weekday[:, None]
    rate = trip_rates[None, :] * open_mob * weekend_mob
    # each commune has its own inbound/outbound trip mix, so the two
    # directions carry independent cross-sectional information
    in_share = rng.uniform(0.45, 0.80, size=n)
    in_counts = rng.poisson(in_share[None, :] * rate)
    out_counts = rng.poisson((1.0 - in_share[None, :]) * rate)

    # OD trips per (day, slot, edge)
    edges = [(i, j) for i in range(n) for j in range(n)
             if c[i, j] > 0 or i == j]
    edge_arr = np.array(edges)
    commuters = config.od_scale * m * populations
    base_edge = np.where(
        edge_arr[:, 0] == edge_arr[:, 1],
        0.08 * config.od_scale * populations[edge_arr[:, 0]],
        commuters[edge_arr[:, 0]] * c[edge_arr[:, 0], edge_arr[:, 1]],
    )
    open_o = open_mob[:, edge_arr[:, 0]]
    open_d = open_mob[:, edge_arr[:, 1]]
    daily_edge = base_edge[None, :] * open_o * open_d * weekend_mob
    means = daily_edge[:, None, :] * np.array(_SLOT_SHARE)[None, :, None]
    od_counts = rng.poisson(means)

    truth = GroundTruth(
        labels=dict(labels),
        coefficients=config.regression.beta,
        regression_noise_sd=config.regression.noise_sd,
        delta=None if plan is None else plan.delta,
        cohort=() if plan is None else plan.cohort,
        lifting_day=None if plan is None else plan.day,
        report_rate=config.noise.report_rate,
        seed=config.seed,
        trajectories={
            cid: {
                "S": [round(float(v), 3) for v in S[:, i]],
                "E": [round(float(v), 3) for v in E[:, i]],
                "I": [round(float(v), 3) for v in I[:, i]],
                "R": [round(float(v), 3) for v in R[:, i]],
            }
            for i, cid in enumerate(ids)
        },
    )

    return SimResult(
        config=config,
        date_index=date_index,
        commune_ids=tuple(ids),
        communes=communes,
        labels=dict(labels),
        commute_share=m,
        commute_dist=c,
        open_epi=open_epi,
        open_mob=open_mob,
        S=S, E=E, I=I, R=R,
        counterfactual_cum=cum_detected,
        reported_float=reported_float,
        emitted_cum=emitted_cum,
        hex_ids=tuple(hex_ids),
        hex_commune=dict(hex_commune),
        hex_counts=hex_counts,
        in_counts=in_counts,
        out_counts=out_counts,
        od_edges=tuple((int(i), int(j)) for i, j in edges),
        od_counts=od_counts,
        schedule=schedule,
        ground_truth=truth,
    )


def hex_records(sim: SimResult) -> list[HexScoreRecord]:
    """The generator's hexagon counts as ingestion records."""
    out = []
    dates = sim.date_index.dates()
    for t, day in enumerate(dates):
        for k, hid in enumerate(sim.hex_ids):
            out.append(HexScoreRecord(day, hid, sim.hex_commune[hid],
                                      int(sim.hex_counts[t, k])))
    return out


def od_matrices(sim: SimResult) -> list[ODMatrix]:
    """The generator's OD counts as ODMatrix objects (zero cells dropped)."""
    ids = sim.commune_ids
    out = []
    dates = sim.date_index.dates()
    for t, day in enumerate(dates):
        for s, slot in enumerate(SIM_SLOTS):
            trips = {}
            for e, (i, j) in enumerate(sim.od_edges):
                v = int(sim.od_counts[t, s, e])
                if v > 0:
                    trips[(ids[i], ids[j])] = v
            if trips:
                out.append(ODMatrix(day, slot, trips))
    return out


def as_region(sim: SimResult) -> StudyRegion:
    """Assemble the StudyRegion the ingestion pipeline would produce.

    Panels: percentile scores (via the real scoring pipeline), raw MobIn /
    MobOut counts, the combined normalized mobility index, reported
    cumulative cases, and the case derivatives.
    """
    panels: dict[tuple[str, str], PanelSeries] = {}
    grid = score_hexagons(hex_records(sim), sim.date_index)
    for cid, series in commune_score_panel(grid).items():
        panels[(cid, Variable.SCORE.value)] = series

    none_missing = np.zeros(sim.date_index.n_days, dtype=bool)
    mob_in = {}
    mob_out = {}
    for i, cid in enumerate(sim.commune_ids):
        mob_in[cid] = PanelSeries(cid, Variable.MOB_IN,
                                  sim.in_counts[:, i].astype(float),
                                  none_missing)
        mob_out[cid] = PanelSeries(cid, Variable.MOB_OUT,
                                   sim.out_counts[:, i].astype(float),
                                   none_missing)
        panels[(cid, Variable.MOB_IN.value)] = mob_in[cid]
        panels[(cid, Variable.MOB_OUT.value)] = mob_out[cid]
        panels[(cid, Variable.CUM_CASES.value)] = PanelSeries(
            cid, Variable.CUM_CASES, sim.emitted_cum[:, i], none_missing
        )
    index_panels, _const = mobility_index_panels(mob_in, mob_out)
    for cid, series in index_panels.items():
        panels[(cid, Variable.MOBILITY_INDEX.value)] = series

    region = StudyRegion(dict(sim.communes), sim.date_index, panels,
                         sim.schedule)
    return add_case_derivatives(region)


def cross_section(
    sim: SimResult,
    seed: "int | None" = None,
    cutoff_offset: int = 29,
    k_risk: int = 7,
):
    """A regression cross-section with the planted coefficient vector.

    Covariates come from the simulated panel through the real pipeline
    (flow into the top-``k_risk`` case-rate communes at the cutoff, window
    means of the rest); the response is X @ beta + Gaussian noise. Returns
    the design with the synthetic response substituted.
    """
    from .inference import build_design

    region = as_region(sim)
    cutoff = min(cutoff_offset, sim.date_index.n_days - 1)
    rates = {}
    for cid in sim.commune_ids:
        series = region.panel(cid, Variable.CUM_CASES_PER_100K)
        rates[cid] = float(series.values[cutoff])
    risk = risk_set(rates, k_risk)
    window = (sim.date_index.start, sim.date_index.date_at(cutoff))
    pops = {cid: sim.communes[cid].population for cid in sim.commune_ids}
    flow = flow_vector(od_matrices(sim), risk, window, pops)
    design = build_design(region, flow)
    beta = np.array(sim.config.regression.beta)
    rng = np.random.default_rng([sim.config.seed if seed is None else seed, 2])
    y = design.X @ beta + sim.config.regression.noise_sd \
        * rng.standard_normal(design.n)
    return dataclasses.replace(design, y=y)


def _transition_log(sim: SimResult) -> TransitionLog:
    """Fabricate event streams realizing the daily transition counts.

    Every transition is an isolated two-event device (fresh device id), so
    consecutive-event counting reproduces the planted counts exactly.
    """
    ids = sim.commune_ids
    n = len(ids)
    A = sim.config.antennas_per_commune
    antenna_map = {}
    for i, cid in enumerate(ids):
        for a in range(A):
            antenna_map[f"a{i:02d}{a}"] = (
                cid,
                round(-33.3 - 0.01 * i, 4),
                round(-70.5 - 0.01 * a, 4),
            )
    events = []
    dates = sim.date_index.dates()
    for t, day in enumerate(dates):
        for i, cid in enumerate(ids):
            k_in = int(sim.in_counts[t, i])
            for k in range(k_in):
                dev = f"di{i:02d}d{t:03d}n{k:03d}"
                t0 = datetime.combine(day, time(8, 0)) + timedelta(
                    seconds=40 * k
                )
                events.append(TransitionEvent(dev, t0, f"a{i:02d}0"))
                events.append(TransitionEvent(
                    dev, t0 + timedelta(seconds=20), f"a{i:02d}1"
                ))
            k_out = int(sim.out_counts[t, i])
            dest_row = sim.commute_dist[i]
            dest_order = np.flatnonzero(dest_row > 0)
            if dest_order.size == 0:
                dest_order = np.array([(i + 1) % n])
            for k in range(k_out):
                dev = f"do{i:02d}d{t:03d}n{k:03d}"
                j = int(dest_order[k % dest_order.size])
                t0 = datetime.combine(day, time(12, 0)) + timedelta(
                    seconds=40 * k
                )
                events.append(TransitionEvent(dev, t0, f"a{i:02d}0"))
                events.append(TransitionEvent(
                    dev, t0 + timedelta(seconds=20), f"a{j:02d}0"
                ))
    return TransitionLog(tuple(events), antenna_map)


def generate(config: CityConfig, out_dir: "str | Path") -> dict[str, Path]:
    """Simulate and write every ingestion file plus ``ground_truth.json``.

    Identical configs (seed included) produce byte-identical files.
    """
    sim = simulate(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "socio": out / "socio.csv",
        "cases": out / "cases.csv",
        "hex_scores": out / "hex_scores.csv",
        "od": out / "od.csv",
        "transitions": out / "transitions.csv",
        "antennas": out / "antennas.csv",
        "schedule": out / "schedule.csv",
        "ground_truth": out / "ground_truth.json",
    }
    write_socio(paths["socio"], sim.communes)

    none_missing = np.zeros(sim.date_index.n_days, dtype=bool)
    case_series = {
        cid: PanelSeries(cid, Variable.CUM_CASES, sim.emitted_cum[:, i],
                         none_missing)
        for i, cid in enumerate(sim.commune_ids)
    }
    write_cases(paths["cases"], case_series, sim.date_index)
    write_hex_scores(paths["hex_scores"], hex_records(sim))
    write_od(paths["od"], od_matrices(sim))
    write_transitions(paths["transitions"], paths["antennas"],
                      _transition_log(sim))
    write_schedule(paths["schedule"], sim.schedule, sim.date_index)
    paths["ground_truth"].write_text(sim.ground_truth.to_json() + "\n",
                                     encoding="utf-8")
    return paths
