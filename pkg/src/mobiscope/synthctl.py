"""Synthetic control and ridge-augmented synthetic control estimation.

The plain estimator finds simplex weights over donor communes whose weighted
pre-treatment outcomes best match the treated commune (constrained least
squares solved by a primal active-set method). The augmented variant adds a
ridge-regression bias correction fitted across donors — predicting post
outcomes from pre-period profiles — which provably never worsens pre-period
fit: the ASCM pre-gap is lam*(M + lam*I)^(-1) applied to the SCM pre-gap,
a contraction for every lam >= 0.

Staggered adoption is handled by event-time alignment: each treated commune
is fitted against donors that remain untreated through its own post window,
and the per-commune gap series are averaged at each event time.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg

from .core import PanelSeries, StudyRegion, Variable, moving_average

logger = logging.getLogger("mobiscope.synthctl")

__all__ = [
    "ScmProblem",
    "ScmFit",
    "StaggeredFit",
    "PlaceboResult",
    "ConvergenceError",
    "scm_weights",
    "kkt_residual",
    "lambda_grid",
    "choose_lambda",
    "ascm_fit",
    "staggered_ascm",
    "placebo_distribution",
    "prepare_outcome",
    "OUTCOME_NEW_CASES",
]

KKT_TOL = 1e-8

#: Outcome name for the cases analysis: 7-day centered moving average of
#: daily new cases per 100k inhabitants.
OUTCOME_NEW_CASES = "new_cases_smoothed_per_100k"


class ConvergenceError(RuntimeError):
    """The active-set solver exhausted its iteration budget."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (KKT residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class ScmProblem:
    """A synthetic-control estimation task.

    ``treated`` maps commune ids to treatment day offsets; ``donors`` is the
    candidate donor pool (clean-control filtering against each treated
    unit's window happens at fit time). Windows are in days. When
    ``cluster_labels`` is given, each treated unit only accepts donors
    sharing its cluster label.
    """

    outcome: str
    treated: dict[str, int]
    donors: frozenset[str]
    pre_window: int = 42
    post_window: int = 28
    cluster_labels: "Mapping[str, int] | None" = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "donors", frozenset(self.donors))
        if not self.treated:
            raise ValueError("at least one treated commune required")
        if self.donors & set(self.treated):
            raise ValueError("donor and treated sets must be disjoint")
        if self.pre_window < 2:
            raise ValueError("pre-window must span at least 2 days")
        if self.post_window < 1:
            raise ValueError("post-window must span at least 1 day")
        for cid, day in self.treated.items():
            if day < 0:
                raise ValueError(f"negative treatment day for {cid!r}")


def scm_weights(
    x1: np.ndarray,
    X0: np.ndarray,
    tol: float = KKT_TOL,
    max_iter: "int | None" = None,
) -> np.ndarray:
    """Simplex-constrained least squares: min ||X0 w - x1||², w >= 0, sum 1.

    Primal active-set iteration from uniform weights; each subproblem solves
    the equality-constrained KKT system restricted to the free coordinates.
    Deterministic; raises :class:`ConvergenceError` if the KKT residual
    cannot be brought under ``tol``.
    """
    x1 = np.asarray(x1, dtype=float)
    X0 = np.asarray(X0, dtype=float)
    if X0.ndim != 2 or x1.ndim != 1 or X0.shape[0] != x1.size:
        raise ValueError("X0 must be (T, J) and x1 (T,)")
    J = X0.shape[1]
    if J == 0:
        raise ValueError("no donors")
    if J == 1:
        return np.ones(1)
    if max_iter is None:
        max_iter = 50 + 12 * J

    G = 2.0 * (X0.T @ X0)
    c = 2.0 * (X0.T @ x1)
    w = np.full(J, 1.0 / J)
    free = np.ones(J, dtype=bool)

    def solve_eqp(mask: np.ndarray) -> tuple[np.ndarray, float]:
        idx = np.flatnonzero(mask)
        m = idx.size
        K = np.zeros((m + 1, m + 1))
        K[:m, :m] = G[np.ix_(idx, idx)]
        K[:m, m] = 1.0
        K[m, :m] = 1.0
        rhs = np.concatenate([c[idx], [1.0]])
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
        return sol[:m], float(sol[m])

    for _ in range(max_iter):
        w_f, nu = solve_eqp(free)
        idx = np.flatnonzero(free)
        if w_f.min() >= -1e-12:
            w = np.zeros(J)
            w[idx] = np.clip(w_f, 0.0, None)
            s = w.sum()
            if s > 0:
                w /= s
            # check the bound multipliers of the zeroed coordinates
            g = G @ w - c
            candidates = np.flatnonzero(~free)
            if candidates.size:
                slack = g[candidates] + nu
                worst = slack.min()
                scale = max(1.0, float(np.abs(g).max()))
                if worst < -tol * scale:
                    free[candidates[int(np.argmin(slack))]] = True
                    continue
            return w
        # partial step toward the EQP solution until a coordinate hits zero
        target = np.zeros(J)
        target[idx] = w_f
        d = target - w
        shrink = (d < -1e-15) & free
        if not shrink.any():
            # no blocking coordinate; accept clipped solution next round
            w = np.clip(target, 0.0, None)
            w /= w.sum()
            continue
        ratios = -w[shrink] / d[shrink]
        alpha = min(1.0, float(ratios.min()))
        w = w + alpha * d
        hit = np.flatnonzero(free & (w <= 1e-14))
        w[hit] = 0.0
        free[hit] = False
        if not free.any():  # pragma: no cover - defensive
            free[int(np.argmax(target))] = True

    raise ConvergenceError(
        "active-set iteration limit reached", kkt_residual(x1, X0, w)
    )


def kkt_residual(x1: np.ndarray, X0: np.ndarray, w: np.ndarray) -> float:
    """Normalized KKT violation of a simplex-constrained LS solution.

    Combines feasibility (negativity, sum-to-one drift), stationarity on the
    support, and dual feasibility off the support, scaled by the gradient
    magnitude so the tolerance is dimensionless.
    """
    x1 = np.asarray(x1, dtype=float)
    X0 = np.asarray(X0, dtype=float)
    w = np.asarray(w, dtype=float)
    g = 2.0 * (X0.T @ (X0 @ w - x1))
    support = w > 1e-12
    if not support.any():
        return math.inf
    nu = -float(g[support].mean())
    scale = max(1.0, float(np.abs(g).max()))
    res = max(
        float(-w.min()) if w.min() < 0 else 0.0,
        abs(float(w.sum()) - 1.0),
        float(np.abs(g[support] + nu).max()) / scale,
    )
    off = ~support
    if off.any():
        res = max(res, max(0.0, -float((g[off] + nu).min())) / scale)
    return res


def lambda_grid(
    x1_pre: np.ndarray, X0_pre: np.ndarray, n_points: int = 20
) -> np.ndarray:
    """Log-spaced ridge penalties spanning 1e-3..1e3 x pre-outcome variance."""
    pooled = np.concatenate([np.ravel(x1_pre), np.ravel(X0_pre)])
    var = float(np.var(pooled))
    if var <= 0:
        var = 1.0
    return var * np.logspace(-3.0, 3.0, n_points)


def _ridge_eta(
    X0_pre: np.ndarray, targets: np.ndarray, lam: float
) -> np.ndarray:
    """Ridge coefficients per target column, regressing across donors.

    ``X0_pre`` is (T0, J): donor pre profiles as columns. ``targets`` is
    (T1, J): one row per target time, entries per donor. Returns (T0, T1):
    eta column t predicts target row t from a centered pre profile.
    """
    P = X0_pre.T  # (J, T0) donors as rows
    Pc = P - P.mean(axis=0)
    Q = targets.T  # (J, T1)
    Qc = Q - Q.mean(axis=0)
    M = Pc.T @ Pc
    T0 = M.shape[0]
    if lam > 0:
        return linalg.solve(M + lam * np.eye(T0), Pc.T @ Qc, assume_a="pos")
    return np.linalg.lstsq(M, Pc.T @ Qc, rcond=None)[0]


def _ascm_core(
    x1_pre: np.ndarray,
    X0_pre: np.ndarray,
    x1_post: np.ndarray,
    X0_post: np.ndarray,
    lam: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Weights, pre and post gaps, and post-mean ridge coefficients."""
    w = scm_weights(x1_pre, X0_pre)
    r = x1_pre - X0_pre @ w
    eta_post = _ridge_eta(X0_pre, X0_post, lam)  # (T0, T1)
    eta_pre = _ridge_eta(X0_pre, X0_pre, lam)  # (T0, T0)
    gap_post = x1_post - (X0_post @ w + eta_post.T @ r)
    gap_pre = x1_pre - (X0_pre @ w + eta_pre.T @ r)
    return w, gap_pre, gap_post, eta_post.mean(axis=1)


def choose_lambda(
    x1_pre: np.ndarray,
    X0_pre: np.ndarray,
    X0_post: np.ndarray,
    grid: "Sequence[float] | None" = None,
) -> tuple[float, dict[float, float]]:
    """Leave-one-donor-out CV: refit each donor as pseudo-treated per lam.

    Returns the penalty minimizing mean squared post-prediction error (ties
    go to the smaller penalty) and the full CV curve.
    """
    if grid is None:
        grid = lambda_grid(x1_pre, X0_pre)
    grid = np.asarray(list(grid), dtype=float)
    if grid.size == 0 or np.any(grid < 0) or not np.all(np.isfinite(grid)):
        raise ValueError("degenerate lambda grid")
    J = X0_pre.shape[1]
    if J < 2:
        return float(grid[0]), {float(g): math.nan for g in grid}
    folds = []
    for j in range(J):
        others = [k for k in range(J) if k != j]
        w_j = scm_weights(X0_pre[:, j], X0_pre[:, others])
        r_j = X0_pre[:, j] - X0_pre[:, others] @ w_j
        folds.append((j, others, w_j, r_j))
    errors: dict[float, float] = {}
    for lam in grid:
        total = 0.0
        for j, others, w_j, r_j in folds:
            eta = _ridge_eta(X0_pre[:, others], X0_post[:, others], float(lam))
            pred = X0_post[:, others] @ w_j + eta.T @ r_j
            total += float(np.mean((X0_post[:, j] - pred) ** 2))
        errors[float(lam)] = total / J
    best = min(errors.items(), key=lambda kv: (kv[1], kv[0]))[0]
    return best, errors


@dataclass(frozen=True)
class ScmFit:
    """One treated commune's synthetic-control fit."""

    treated_id: str
    treatment_day: int
    donor_ids: tuple[str, ...]
    weights: dict[str, float]
    lam: float
    ridge_coefficients: np.ndarray
    gap: PanelSeries
    att: float
    pre_rmse_scm: float
    pre_rmse_ascm: float


def prepare_outcome(region: StudyRegion, outcome: str) -> dict[str, np.ndarray]:
    """Outcome arrays per commune for SCM fitting (NaN marks missing).

    ``new_cases_smoothed_per_100k`` applies the documented case transform:
    daily new cases per 100k inhabitants, smoothed with a 7-day centered
    moving average. Any panel variable name is accepted as-is otherwise.
    """
    out: dict[str, np.ndarray] = {}
    if outcome == OUTCOME_NEW_CASES:
        for cid in region.units_with(Variable.NEW_CASES):
            series = region.panel(cid, Variable.NEW_CASES)
            pop = region.communes[cid].population
            per100k = PanelSeries(
                cid,
                Variable.NEW_CASES,
                series.values * (100_000.0 / pop),
                series.missing,
            )
            out[cid] = moving_average(per100k, 7).values
        return out
    for cid in region.units_with(outcome):
        out[cid] = region.panel(cid, outcome).values.copy()
    return out


def _pre_safe_outcome(
    region: StudyRegion, outcome: str, unit: str, day: int, base: np.ndarray
) -> np.ndarray:
    """Treated outcome with pre-treatment values free of post-day leakage.

    The centered smoothing window would otherwise blend days >= ``day``
    into the last three pre-treatment values. Those entries are replaced
    by re-smoothing the raw per-100k series with every day from ``day``
    on masked, so event times < 0 depend on pre-treatment data only. Raw
    (unsmoothed) outcomes are returned unchanged.
    """
    if outcome != OUTCOME_NEW_CASES:
        return base
    series = region.panel(unit, Variable.NEW_CASES)
    pop = region.communes[unit].population
    masked = series.missing.copy()
    masked[day:] = True
    per100k = PanelSeries(
        unit,
        Variable.NEW_CASES,
        series.values * (100_000.0 / pop),
        masked,
    )
    safe = base.copy()
    safe[:day] = moving_average(per100k, 7).values[:day]
    return safe


def _window_slices(
    day: int, pre: int, post: int, n_days: int
) -> tuple[slice, slice]:
    if day - pre < 0:
        raise ValueError(f"treatment day {day} has fewer than {pre} pre days")
    return slice(day - pre, day), slice(day, min(day + post, n_days))


def ascm_fit(
    region: StudyRegion,
    problem: ScmProblem,
    unit: "str | None" = None,
    fixed_lambda: "float | None" = None,
    donor_days: "Mapping[str, int | None] | None" = None,
    outcomes: "dict[str, np.ndarray] | None" = None,
) -> ScmFit:
    """Augmented SCM for one treated commune of the problem.

    ``unit`` defaults to the problem's single treated commune. Donors are
    filtered to clean controls: a donor with its own treatment day (from
    ``donor_days``) inside the unit's post window is dropped, as is any
    donor with incomplete outcome data over the aligned window. The ridge
    penalty comes from leave-one-donor-out CV unless ``fixed_lambda``.
    """
    if unit is None:
        if len(problem.treated) != 1:
            raise ValueError("unit required when several communes are treated")
        unit = next(iter(problem.treated))
    day = problem.treated[unit]
    if outcomes is None:
        outcomes = prepare_outcome(region, problem.outcome)
    if unit not in outcomes:
        raise ValueError(f"no outcome series for treated commune {unit!r}")
    n_days = region.date_index.n_days
    pre_s, post_s = _window_slices(day, problem.pre_window, problem.post_window,
                                   n_days)
    donor_days = donor_days or {}
    labels = problem.cluster_labels
    donor_ids = []
    for d in sorted(problem.donors):
        d_day = donor_days.get(d)
        if d_day is not None and d_day < day + problem.post_window:
            continue
        if labels is not None and labels.get(d) != labels.get(unit):
            continue
        arr = outcomes.get(d)
        if arr is None or not np.all(np.isfinite(arr[pre_s])) or not np.all(
            np.isfinite(arr[post_s])
        ):
            continue
        donor_ids.append(d)
    if not donor_ids:
        raise ValueError(f"no eligible donors for {unit!r} at day {day}")

    x1 = _pre_safe_outcome(region, problem.outcome, unit, day, outcomes[unit])
    x1_pre = x1[pre_s]
    x1_post = x1[post_s]
    if not np.all(np.isfinite(x1_pre)):
        raise ValueError(f"treated commune {unit!r} has missing pre-window data")
    X0_pre = np.column_stack([outcomes[d][pre_s] for d in donor_ids])
    X0_post = np.column_stack([outcomes[d][post_s] for d in donor_ids])

    if fixed_lambda is not None:
        lam = float(fixed_lambda)
        if lam < 0:
            raise ValueError("lambda must be non-negative")
    else:
        lam, _ = choose_lambda(x1_pre, X0_pre, X0_post)

    w, gap_pre, gap_post, eta_mean = _ascm_core(
        x1_pre, X0_pre, x1_post, X0_post, lam
    )
    scm_pre_gap = x1_pre - X0_pre @ w
    pad = problem.post_window - gap_post.size
    values = np.concatenate([gap_pre, gap_post, np.full(max(pad, 0), np.nan)])
    missing = ~np.isfinite(values)
    finite_post = gap_post[np.isfinite(gap_post)]
    att = float(finite_post.mean()) if finite_post.size else math.nan
    gap_series = PanelSeries(unit, problem.outcome, values, missing)
    return ScmFit(
        unit,
        day,
        tuple(donor_ids),
        {d: float(w[i]) for i, d in enumerate(donor_ids)},
        float(lam),
        eta_mean,
        gap_series,
        att,
        float(np.sqrt(np.mean(scm_pre_gap**2))),
        float(np.sqrt(np.mean(gap_pre**2))),
    )


@dataclass(frozen=True)
class StaggeredFit:
    """Event-time averaged ASCM over a staggered treated cohort."""

    event_days: np.ndarray
    avg_gap: np.ndarray
    n_treated: np.ndarray
    att: float
    fits: dict[str, ScmFit] = field(default_factory=dict)
    excluded: tuple[str, ...] = ()


def staggered_ascm(
    region: StudyRegion,
    problem: ScmProblem,
    donor_days: "Mapping[str, int | None] | None" = None,
    fixed_lambda: "float | None" = None,
) -> StaggeredFit:
    """Fit every treated commune in event time and average the gaps.

    Day 0 is each commune's own treatment day. Communes without a full pre
    window or without eligible donors are excluded with a warning; if all
    are excluded, estimation fails. The cohort ATT is the unweighted mean
    of per-commune ATTs.
    """
    outcomes = prepare_outcome(region, problem.outcome)
    fits: dict[str, ScmFit] = {}
    excluded: list[str] = []
    for unit in sorted(problem.treated):
        try:
            fits[unit] = ascm_fit(
                region,
                problem,
                unit=unit,
                fixed_lambda=fixed_lambda,
                donor_days=donor_days,
                outcomes=outcomes,
            )
        except ValueError as exc:
            logger.warning("excluding treated commune %s: %s", unit, exc)
            excluded.append(unit)
    if not fits:
        raise ValueError("no treated commune could be fitted")

    pre, post = problem.pre_window, problem.post_window
    event_days = np.arange(-pre, post)
    total = np.zeros(event_days.size)
    counts = np.zeros(event_days.size, dtype=int)
    for fit in fits.values():
        gap = fit.gap
        for k in range(event_days.size):
            if not gap.missing[k]:
                total[k] += gap.values[k]
                counts[k] += 1
    avg = np.where(counts > 0, total / np.maximum(counts, 1), np.nan)
    att = float(np.mean([f.att for f in fits.values()]))
    return StaggeredFit(event_days, avg, counts, att, fits, tuple(excluded))


@dataclass(frozen=True)
class PlaceboResult:
    """In-space placebo test: every donor refitted as if treated."""

    pseudo_atts: dict[str, float]
    true_att: float
    rank: int


def placebo_distribution(
    region: StudyRegion,
    problem: ScmProblem,
    donor_days: "Mapping[str, int | None] | None" = None,
    fixed_lambda: "float | None" = None,
) -> PlaceboResult:
    """Pseudo-ATT per donor, plus the rank of the true cohort ATT.

    Each donor is refitted as if treated at the cohort's earliest treatment
    day, against the remaining donors. Donors that are not themselves clean
    controls over that window (their own treatment starts before the post
    window ends) are skipped: their genuine treatment would masquerade as a
    placebo effect. The rank orders |ATT| descending: rank 1 means the true
    effect is more extreme than every placebo.
    """
    if len(problem.donors) < 3:
        raise ValueError("placebo test needs at least 3 donors")
    true_fit = staggered_ascm(region, problem, donor_days, fixed_lambda)
    day = min(problem.treated.values())
    outcomes = prepare_outcome(region, problem.outcome)
    donor_days = donor_days or {}
    pseudo: dict[str, float] = {}
    for d in sorted(problem.donors):
        d_day = donor_days.get(d)
        if d_day is not None and d_day < day + problem.post_window:
            logger.warning(
                "placebo fit skipped for donor %s: treated at day %d",
                d, d_day,
            )
            continue
        rest = problem.donors - {d}
        try:
            sub = ScmProblem(
                problem.outcome,
                {d: day},
                rest,
                problem.pre_window,
                problem.post_window,
                problem.cluster_labels,
            )
            fit = ascm_fit(
                region,
                sub,
                unit=d,
                fixed_lambda=fixed_lambda,
                donor_days=donor_days,
                outcomes=outcomes,
            )
        except ValueError as exc:
            logger.warning("placebo fit skipped for donor %s: %s", d, exc)
            continue
        pseudo[d] = fit.att
    rank = 1 + sum(
        1 for v in pseudo.values() if abs(v) > abs(true_fit.att)
    )
    return PlaceboResult(pseudo, true_fit.att, rank)
