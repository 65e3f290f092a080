"""Cross-sectional regression and correlation analytics.

The regression model explains cumulative cases at the end of a study window
with window-averaged mobility covariates and an interaction term:

    CumCases_i = b0 + b1*MobIn_i + b2*MobOut_i + b3*Flow_i + b4*Score_i
                 + b5*(MobOut_i * Flow_i) + e_i

Estimation is least squares through a QR decomposition of the design (the
normal equations survive only in the test oracle), with classical
homoskedastic standard errors and the familiar summary-report layout
(coefficient table with significance stars, residual SE, R², F statistic).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from datetime import date as Date, timedelta
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg, stats

from .core import PanelSeries, StudyRegion, Variable, window_mean
from .mobility import FlowVector

logger = logging.getLogger("mobiscope.inference")

__all__ = [
    "DESIGN_COLUMNS",
    "DesignMatrix",
    "build_design",
    "SingularDesignError",
    "FitReport",
    "ols_fit",
    "format_fit_report",
    "write_fit_report",
    "cross_sectional_corr",
    "mobility_corr_matrix",
    "r_squared_snapshot",
]

DESIGN_COLUMNS = ("(Intercept)", "MobIn", "MobOut", "Flow", "Score", "MobOut:Flow")


class SingularDesignError(ValueError):
    """The design matrix is rank deficient."""


@dataclass(frozen=True)
class DesignMatrix:
    """A named regression design: rows are communes, response is CumCases."""

    unit_ids: tuple[str, ...]
    columns: tuple[str, ...]
    X: np.ndarray
    y: np.ndarray
    response: str = "CumCases"
    dropped: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if X.ndim != 2 or y.ndim != 1:
            raise ValueError("X must be 2-D and y 1-D")
        if X.shape[0] != len(self.unit_ids) or X.shape[0] != y.size:
            raise ValueError("row count mismatch between units, X, and y")
        if X.shape[1] != len(self.columns):
            raise ValueError("column count mismatch")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]


def build_design(
    region: StudyRegion,
    flow: FlowVector,
    window: "tuple[Date, Date] | None" = None,
    per_100k: bool = False,
) -> DesignMatrix:
    """Assemble the regression design over a date window (inclusive ends).

    Score, MobIn, and MobOut are mask-aware window means; Flow comes from
    the supplied flow vector (whose window is the default); CumCases is the
    cumulative count at the window end (last reported value up to that
    day), divided by population per 100k when ``per_100k``. Communes
    missing any ingredient are dropped and reported in ``dropped``.
    """
    if window is None:
        window = flow.window
    start, end = window
    a = region.date_index.clip_offset(start)
    b = region.date_index.clip_offset(end + timedelta(days=1))
    if a >= b:
        raise ValueError(f"window [{start}, {end}] does not intersect the index")

    rows = []
    ys = []
    units = []
    dropped = []
    for cid in sorted(region.communes):
        if cid not in flow.flows:
            dropped.append(cid)
            continue
        needed = (Variable.SCORE, Variable.MOB_IN, Variable.MOB_OUT,
                  Variable.CUM_CASES)
        if not all(region.has_panel(cid, v) for v in needed):
            dropped.append(cid)
            continue
        score = window_mean(region.panel(cid, Variable.SCORE), (a, b))
        mob_in = window_mean(region.panel(cid, Variable.MOB_IN), (a, b))
        mob_out = window_mean(region.panel(cid, Variable.MOB_OUT), (a, b))
        cases = region.panel(cid, Variable.CUM_CASES)
        present = np.flatnonzero(~cases.missing[:b])
        cum = float(cases.values[present[-1]]) if present.size else math.nan
        if per_100k:
            cum *= 100_000.0 / region.communes[cid].population
        f = flow.flows[cid]
        if any(math.isnan(v) for v in (score, mob_in, mob_out, cum)):
            dropped.append(cid)
            continue
        rows.append([1.0, mob_in, mob_out, f, score, mob_out * f])
        ys.append(cum)
        units.append(cid)
    if dropped:
        logger.warning("build_design dropped %d commune(s): %s",
                       len(dropped), ", ".join(dropped))
    if not rows:
        raise ValueError("no commune has complete covariates in the window")
    response = "CumCasesPer100k" if per_100k else "CumCases"
    return DesignMatrix(tuple(units), DESIGN_COLUMNS, np.array(rows),
                        np.array(ys), response=response,
                        dropped=tuple(dropped))


@dataclass(frozen=True)
class FitReport:
    """Everything the classic linear-model summary prints."""

    columns: tuple[str, ...]
    estimates: np.ndarray
    std_errors: np.ndarray
    t_values: np.ndarray
    p_values: np.ndarray
    sigma: float
    df_residual: int
    r_squared: float
    adj_r_squared: float
    f_statistic: float
    f_df: tuple[int, int]
    f_pvalue: float
    n_obs: int


def ols_fit(design: DesignMatrix) -> FitReport:
    """Least squares via QR, classical SEs, t/F tests.

    Requires more rows than columns and a full-rank design; rank deficiency
    raises :class:`SingularDesignError` naming the dependent columns.
    """
    X, y = design.X, design.y
    n, p = X.shape
    if n <= p:
        raise ValueError(f"need more than {p} observations, got {n}")
    Q, R = np.linalg.qr(X, mode="reduced")
    diag = np.abs(np.diag(R))
    tol = max(n, p) * np.finfo(float).eps * (diag.max() if diag.size else 0.0)
    bad = [design.columns[j] for j in range(p) if diag[j] <= tol]
    if bad:
        raise SingularDesignError(
            "design is rank deficient; dependent column(s): " + ", ".join(bad)
        )
    beta = linalg.solve_triangular(R, Q.T @ y)
    resid = y - X @ beta
    df = n - p
    sse = float(resid @ resid)
    sigma2 = sse / df
    r_inv = linalg.solve_triangular(R, np.eye(p))
    cov = sigma2 * (r_inv @ r_inv.T)
    se = np.sqrt(np.diag(cov))
    tvals = beta / se
    pvals = 2.0 * stats.t.sf(np.abs(tvals), df)
    sst = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - sse / sst if sst > 0 else 1.0
    adj = 1.0 - (1.0 - r2) * (n - 1) / df
    k = p - 1  # slope count
    if k > 0 and sse > 0:
        f_stat = ((sst - sse) / k) / (sse / df)
        f_p = float(stats.f.sf(f_stat, k, df))
    else:
        f_stat, f_p = math.inf, 0.0
    return FitReport(
        design.columns,
        beta,
        se,
        tvals,
        pvals,
        math.sqrt(sigma2),
        df,
        r2,
        adj,
        float(f_stat),
        (k, df),
        f_p,
        n,
    )


def _stars(p: float) -> str:
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    if p < 0.1:
        return "."
    return ""


def _fmt_p(p: float) -> str:
    return f"{p:.6f}" if p >= 1e-4 else f"{p:.2e}"


def format_fit_report(report: FitReport) -> str:
    """Classic linear-model summary block (coefficients, stars, R², F)."""
    names = list(report.columns)
    est = [f"{v:.3f}" for v in report.estimates]
    se = [f"{v:.3f}" for v in report.std_errors]
    tv = [f"{v:.3f}" for v in report.t_values]
    pv = [_fmt_p(v) for v in report.p_values]
    name_w = max(len(s) for s in names)
    est_w = max(len("Estimate"), max(len(s) for s in est))
    se_w = max(len("Std. Error"), max(len(s) for s in se))
    t_w = max(len("t value"), max(len(s) for s in tv))
    p_w = max(len("Pr(>|t|)"), max(len(s) for s in pv))

    lines = ["Coefficients:"]
    header = (
        " " * name_w
        + " " + "Estimate".rjust(est_w)
        + " " + "Std. Error".rjust(se_w)
        + " " + "t value".rjust(t_w)
        + " " + "Pr(>|t|)".rjust(p_w)
        + "    "
    )
    lines.append(header)
    for j, name in enumerate(names):
        lines.append(
            name.ljust(name_w)
            + " " + est[j].rjust(est_w)
            + " " + se[j].rjust(se_w)
            + " " + tv[j].rjust(t_w)
            + " " + pv[j].rjust(p_w)
            + " " + _stars(report.p_values[j]).ljust(3)
        )
    lines.append("---")
    lines.append("Signif. codes:  0 '***' 0.001 '**' 0.01 '*' 0.05 '.' 0.1 ' ' 1")
    lines.append("")
    lines.append(
        f"Residual standard error: {report.sigma:.4g} on "
        f"{report.df_residual} degrees of freedom"
    )
    lines.append(
        f"Multiple R-squared:  {report.r_squared:.4g},\t"
        f"Adjusted R-squared:  {report.adj_r_squared:.4g} "
    )
    lines.append(
        f"F-statistic: {report.f_statistic:.4g} on {report.f_df[0]} and "
        f"{report.f_df[1]} DF,  p-value: {report.f_pvalue:.4g}"
    )
    return "\n".join(lines) + "\n"


def write_fit_report(out_dir: "str | Path", report: FitReport) -> tuple[Path, Path]:
    """Write ``fit_report.txt`` (summary block) and ``fit_report.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    txt = out / "fit_report.txt"
    txt.write_text(format_fit_report(report), encoding="utf-8")
    csv_path = out / "fit_report.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["term", "estimate", "std_error", "t_value", "p_value"])
        for j, name in enumerate(report.columns):
            writer.writerow([
                name,
                repr(float(report.estimates[j])),
                repr(float(report.std_errors[j])),
                repr(float(report.t_values[j])),
                repr(float(report.p_values[j])),
            ])
        writer.writerow(["r_squared", repr(report.r_squared), "", "", ""])
        writer.writerow(["adj_r_squared", repr(report.adj_r_squared), "", "", ""])
        writer.writerow(["sigma", repr(report.sigma), "", "", ""])
        writer.writerow(["f_statistic", repr(report.f_statistic), "", "", ""])
        writer.writerow(["f_pvalue", repr(report.f_pvalue), "", "", ""])
    return txt, csv_path


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    denom = math.sqrt(float(a @ a) * float(b @ b))
    return float(a @ b) / denom if denom > 0 else math.nan


def cross_sectional_corr(
    region: StudyRegion,
    variable_a: str = Variable.MOBILITY_INDEX.value,
    variable_b: str = Variable.CUM_CASES_PER_100K.value,
) -> tuple[PanelSeries, np.ndarray]:
    """Pearson correlation across communes of a vs b, per date.

    Returns the correlation series (missing on dates with fewer than three
    communes or zero variance) and the per-date commune count used.
    """
    units = [
        u for u in region.units_with(variable_a)
        if region.has_panel(u, variable_b)
    ]
    n_days = region.date_index.n_days
    r = np.full(n_days, np.nan)
    miss = np.ones(n_days, dtype=bool)
    counts = np.zeros(n_days, dtype=int)
    series_a = [region.panel(u, variable_a) for u in units]
    series_b = [region.panel(u, variable_b) for u in units]
    for t in range(n_days):
        av, bv = [], []
        for sa, sb in zip(series_a, series_b):
            if not sa.missing[t] and not sb.missing[t]:
                av.append(sa.values[t])
                bv.append(sb.values[t])
        counts[t] = len(av)
        if len(av) < 3:
            continue
        value = _pearson(np.array(av), np.array(bv))
        if math.isnan(value):
            logger.warning(
                "zero variance on %s; correlation undefined",
                region.date_index.date_at(t),
            )
            continue
        r[t] = value
        miss[t] = False
    return PanelSeries("region", f"corr_{variable_a}_{variable_b}", r, miss), counts


def mobility_corr_matrix(
    region: StudyRegion, variable: str = Variable.MOBILITY_INDEX.value
) -> tuple[tuple[str, ...], np.ndarray]:
    """Commune-by-commune Pearson matrix of a variable over time.

    Pairwise-complete observations; pairs with fewer than three overlapping
    days (or zero variance) are NaN. Diagonal is 1 by definition.
    """
    units = tuple(region.units_with(variable))
    n = len(units)
    out = np.full((n, n), np.nan)
    panels = [region.panel(u, variable) for u in units]
    for i in range(n):
        out[i, i] = 1.0
        for j in range(i + 1, n):
            both = ~panels[i].missing & ~panels[j].missing
            if both.sum() < 3:
                continue
            value = _pearson(panels[i].values[both], panels[j].values[both])
            out[i, j] = out[j, i] = value
    return units, out


def r_squared_snapshot(
    region: StudyRegion,
    day: "Date | int",
    predictor: str = Variable.MOBILITY_INDEX.value,
    response: str = Variable.CUM_CASES_PER_100K.value,
) -> float:
    """R² of the one-predictor cross-sectional regression at one date.

    With an intercept this equals the squared Pearson correlation between
    predictor and response across communes. NaN when fewer than three
    communes have both values.
    """
    t = day if isinstance(day, int) else region.date_index.offset(day)
    if not 0 <= t < region.date_index.n_days:
        raise ValueError(f"day offset {t} outside the index")
    av, bv = [], []
    for u in region.units_with(predictor):
        if not region.has_panel(u, response):
            continue
        sa = region.panel(u, predictor)
        sb = region.panel(u, response)
        if not sa.missing[t] and not sb.missing[t]:
            av.append(sa.values[t])
            bv.append(sb.values[t])
    if len(av) < 3:
        return math.nan
    r = _pearson(np.array(av), np.array(bv))
    return r * r if not math.isnan(r) else math.nan
