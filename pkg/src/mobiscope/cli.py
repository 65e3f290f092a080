"""Pipeline command line: one subcommand per analysis stage.

Usage::

    mobiscope <subcommand> --config <file> [--out DIR] [--threads N] [--seed S]

Subcommands: ``validate``, ``mobility``, ``cluster``, ``regress``, ``corr``,
``scm``, ``simgen``, ``run-all`` (= validate -> mobility -> cluster ->
regress -> corr -> scm). Every stage writes its output CSVs plus a
``manifest_<stage>.json`` recording input/output hashes, the resolved
configuration, library versions, and any warnings; manifests contain no
timestamps, so reruns with identical inputs are byte-identical.

Exit codes: 0 success, 2 configuration/validation errors, 1 runtime errors.
Logging verbosity comes from ``MOBISCOPE_LOG`` (error|warn|info|debug).

Configuration is a single INI file; flags override file values::

    [inputs]
    socio = data/socio.csv
    cases = data/cases.csv
    schedule = data/schedule.csv
    hex_scores = data/hex_scores.csv
    od = data/od.csv
    transitions = data/transitions.csv
    antennas = data/antennas.csv

    [study]            ; optional; inferred from the cases file when absent
    start_date = 2020-03-01
    n_days = 249

    [mobility]
    risk_cutoff = 2020-03-30   ; date whose case rates define the risk set
    risk_k = 7
    normalization =            ; optional fixed mobility-index constant

    [cluster]
    step_pattern = symmetric2  ; or symmetric1
    window =                   ; optional band radius
    normalize = false
    linkage = complete
    k_min = 2
    k_max = 6

    [regress]
    window_start =             ; default: study start
    window_end =               ; default: risk_cutoff
    per_100k = false           ; response as cumulative cases per 100k

    [corr]
    mobility_variable = mobility_index
    case_variable = cum_cases_per_100k

    [scm]
    outcome = new_cases_smoothed_per_100k
    pre_window = 42
    post_window = 28
    lambda =                   ; optional fixed ridge penalty (else CV)
    treated =                  ; optional comma list; default: all reopened
    placebo = true
    same_cluster = false       ; restrict donors to the treated unit's cluster
    clusters =                 ; clusters.csv path (default: <out>/clusters.csv)

    [simgen]
    out_dir =                  ; default: the --out directory
    seed = 7
    n_days = 249
    start_date = 2020-03-01
    delta =                    ; with lifting_day (and optionally cohort),
    lifting_day =              ;   plants a reopening effect
    cohort =
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import os
import platform
import sys
from datetime import date as Date
from pathlib import Path

import numpy as np

from . import __version__
from .core import DateIndex, InterventionKind, StudyRegion, Variable
from .inference import (
    build_design,
    cross_sectional_corr,
    mobility_corr_matrix,
    ols_fit,
    write_fit_report,
)
from .ingest import (
    SchemaError,
    load_region,
    read_hex_scores,
    read_od,
    read_transitions,
)
from .mobility import (
    commune_score_panel,
    flow_vector,
    mobility_index_panels,
    mobility_indices,
    od_graph,
    risk_set,
    score_hexagons,
    write_od_graph,
)
from .synthctl import ScmProblem, placebo_distribution, staggered_ascm
from .tsclust import (
    CVI_NAMES,
    DtwConfig,
    cut,
    distance_matrix,
    hcluster,
    validity_indices,
)

logger = logging.getLogger(__name__)

RUN_ALL = ("validate", "mobility", "cluster", "regress", "corr", "scm")

_LOG_LEVELS = {
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}


class ConfigError(Exception):
    """A missing or malformed configuration value."""


def _setup_logging() -> None:
    raw = os.environ.get("MOBISCOPE_LOG", "warn").strip().lower()
    if raw not in _LOG_LEVELS:
        raise ConfigError(
            f"MOBISCOPE_LOG must be one of {sorted(_LOG_LEVELS)}, got {raw!r}"
        )
    level = _LOG_LEVELS[raw]
    root = logging.getLogger()
    if not any(getattr(h, "_mobiscope_cli", False) for h in root.handlers):
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        handler._mobiscope_cli = True  # type: ignore[attr-defined]
        root.addHandler(handler)
        root.setLevel(logging.WARNING)
    for h in root.handlers:
        if getattr(h, "_mobiscope_cli", False):
            h.setLevel(level)
    # keep warnings flowing into the manifest tap even when stderr is quieter
    logging.getLogger("mobiscope").setLevel(min(level, logging.WARNING))


class _WarningTap(logging.Handler):
    """Collects pipeline warnings for the stage manifest."""

    def __init__(self) -> None:
        super().__init__(level=logging.WARNING)
        self.messages: list[str] = []

    def emit(self, record: logging.LogRecord) -> None:
        self.messages.append(f"{record.name}: {record.getMessage()}")


# ---------------------------------------------------------------------------
# configuration access


def load_config(path: "str | Path") -> configparser.ConfigParser:
    cfg = configparser.ConfigParser(
        interpolation=None, inline_comment_prefixes=(";", "#")
    )
    try:
        found = cfg.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"bad config file {path}: {exc}") from exc
    if not found:
        raise ConfigError(f"config file not found: {path}")
    return cfg


_REQUIRED = object()


def _raw(cfg, section: str, key: str, default=_REQUIRED) -> "str | None":
    try:
        value = cfg.get(section, key).strip()
    except (configparser.NoSectionError, configparser.NoOptionError):
        value = ""
    if value:
        return value
    if default is _REQUIRED:
        raise ConfigError(f"missing config key [{section}] {key}")
    return None


def _get_str(cfg, section, key, default=_REQUIRED) -> str:
    value = _raw(cfg, section, key, default)
    return default if value is None else value  # type: ignore[return-value]


def _get_int(cfg, section, key, default=_REQUIRED) -> "int | None":
    value = _raw(cfg, section, key, default)
    if value is None:
        return default  # type: ignore[return-value]
    try:
        return int(value)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} must be an integer: {value!r}") from exc


def _get_float(cfg, section, key, default=_REQUIRED) -> "float | None":
    value = _raw(cfg, section, key, default)
    if value is None:
        return default  # type: ignore[return-value]
    try:
        return float(value)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} must be a number: {value!r}") from exc


def _get_bool(cfg, section, key, default: bool) -> bool:
    value = _raw(cfg, section, key, None)
    if value is None:
        return default
    low = value.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"[{section}] {key} must be a boolean: {value!r}")


def _get_date(cfg, section, key, default=_REQUIRED) -> "Date | None":
    value = _raw(cfg, section, key, default)
    if value is None:
        return default  # type: ignore[return-value]
    try:
        return Date.fromisoformat(value)
    except ValueError as exc:
        raise ConfigError(
            f"[{section}] {key} must be an ISO date (YYYY-MM-DD): {value!r}"
        ) from exc


def _input_path(cfg, key: str) -> Path:
    path = Path(_get_str(cfg, "inputs", key))
    if not path.exists():
        raise ConfigError(f"[inputs] {key} does not exist: {path}")
    return path


# ---------------------------------------------------------------------------
# manifest plumbing


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _write_manifest(
    out_dir: Path,
    stage: str,
    config_echo: dict,
    inputs: "list[Path]",
    outputs: "list[Path]",
    warnings: "list[str]",
    extra: "dict | None" = None,
) -> Path:
    import numba
    import scipy

    def _rel(p: Path) -> str:
        try:
            return str(p.relative_to(out_dir))
        except ValueError:
            return str(p)

    manifest = {
        "stage": stage,
        "config": config_echo,
        "inputs": {str(p): _sha256(p) for p in sorted(set(inputs))},
        "outputs": {_rel(p): _sha256(p) for p in sorted(set(outputs))},
        "versions": {
            "mobiscope": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "numba": numba.__version__,
        },
        "warnings": warnings,
    }
    if extra:
        manifest["results"] = extra
    path = out_dir / f"manifest_{stage}.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n",
                    encoding="utf-8")
    return path


def _write_csv(path: Path, header: "list[str]", rows) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _fmt(x: float, places: int = 6) -> str:
    return "" if not np.isfinite(x) else f"{x:.{places}f}"


# ---------------------------------------------------------------------------
# shared stage helpers


def _study_index(cfg) -> "DateIndex | None":
    start = _get_date(cfg, "study", "start_date", None)
    n_days = _get_int(cfg, "study", "n_days", None)
    if (start is None) != (n_days is None):
        raise ConfigError("[study] start_date and n_days must be set together")
    if start is None:
        return None
    return DateIndex(start, n_days)


def _load_study(cfg) -> tuple[StudyRegion, list[Path]]:
    paths = [_input_path(cfg, k) for k in ("socio", "cases", "schedule")]
    region = load_region(*paths, date_index=_study_index(cfg))
    return region, paths


def _score_panels(cfg, region) -> tuple[dict, Path]:
    path = _input_path(cfg, "hex_scores")
    grid = score_hexagons(read_hex_scores(path), region.date_index)
    unknown = set(grid.commune_of.values()) - set(region.communes)
    if unknown:
        raise SchemaError(path, 0,
                          f"hexagons mapped to unknown communes {sorted(unknown)}")
    return commune_score_panel(grid), path


def _mobility_panels(cfg, region):
    """MobIn/MobOut counts and the combined index from the transition log."""
    trans = _input_path(cfg, "transitions")
    antennas = _input_path(cfg, "antennas")
    log = read_transitions(trans, antennas)
    mapped = {c for c, _, _ in log.antenna_map.values()}
    unknown = mapped - set(region.communes)
    if unknown:
        raise SchemaError(antennas, 0,
                          f"antennas mapped to unknown communes {sorted(unknown)}")
    mob_in, mob_out = mobility_indices(log, region.date_index)
    constant = _get_float(cfg, "mobility", "normalization", None)
    index, constant = mobility_index_panels(mob_in, mob_out, constant)
    return mob_in, mob_out, index, constant, [trans, antennas]


def _risk_and_flow(cfg, region, matrices):
    """The high-risk set at the cutoff date and the per-capita flow into it."""
    cutoff = _get_date(cfg, "mobility", "risk_cutoff", Date(2020, 3, 30))
    k = _get_int(cfg, "mobility", "risk_k", 7)
    try:
        offset = region.date_index.offset(cutoff)
    except ValueError as exc:
        raise ConfigError(f"[mobility] risk_cutoff: {exc}") from exc
    rates = {}
    for cid in region.communes:
        if region.has_panel(cid, Variable.CUM_CASES_PER_100K):
            series = region.panel(cid, Variable.CUM_CASES_PER_100K)
            if not series.missing[offset]:
                rates[cid] = float(series.values[offset])
                continue
        rates[cid] = 0.0
        logger.warning("no case rate for %s at %s; treating as 0", cid, cutoff)
    risk = risk_set(rates, k)
    start = _get_date(cfg, "regress", "window_start", region.date_index.start)
    end = _get_date(cfg, "regress", "window_end", cutoff)
    pops = {cid: c.population for cid, c in region.communes.items()}
    flow = flow_vector(matrices, risk, (start, end), pops)
    return risk, flow, cutoff, k


def _merge_panels(region, *panel_maps, variables):
    extra = {}
    for panels, var in zip(panel_maps, variables):
        for cid, series in panels.items():
            extra[(cid, var.value)] = series
    return region.with_panels(extra)


# ---------------------------------------------------------------------------
# stages


def _stage_validate(cfg, out_dir, args):
    region, inputs = _load_study(cfg)
    counts = {
        "communes": len(region.communes),
        "days": region.date_index.n_days,
        "case_series": len(region.units_with(Variable.CUM_CASES)),
        "schedule_entries": len(region.schedule.entries),
    }
    path = _input_path(cfg, "hex_scores")
    counts["hex_records"] = len(read_hex_scores(path))
    inputs.append(path)
    path = _input_path(cfg, "od")
    counts["od_matrices"] = len(read_od(path, known_communes=set(region.communes)))
    inputs.append(path)
    trans = _input_path(cfg, "transitions")
    antennas = _input_path(cfg, "antennas")
    log = read_transitions(trans, antennas)
    counts["transition_events"] = len(log.events)
    inputs.extend([trans, antennas])
    echo = {"start_date": str(region.date_index.start),
            "n_days": region.date_index.n_days}
    return echo, inputs, [], counts


def _stage_mobility(cfg, out_dir, args):
    region, inputs = _load_study(cfg)
    scores, hex_path = _score_panels(cfg, region)
    inputs.append(hex_path)
    mob_in, mob_out, index, constant, mob_inputs = _mobility_panels(cfg, region)
    inputs.extend(mob_inputs)
    od_path = _input_path(cfg, "od")
    matrices = read_od(od_path, known_communes=set(region.communes))
    inputs.append(od_path)
    risk, flow, cutoff, k = _risk_and_flow(cfg, region, matrices)

    dates = region.date_index.dates()
    outputs = []
    rows = []
    for cid in sorted(scores):
        series = scores[cid]
        for t, day in enumerate(dates):
            if not series.missing[t]:
                rows.append([day.isoformat(), cid, _fmt(series.values[t])])
    outputs.append(_write_csv(out_dir / "scores.csv",
                              ["date", "commune_id", "score"], rows))

    rows = []
    for cid in sorted(index):
        for t, day in enumerate(dates):
            rows.append([
                day.isoformat(), cid,
                int(mob_in[cid].values[t]), int(mob_out[cid].values[t]),
                _fmt(index[cid].values[t]),
            ])
    outputs.append(_write_csv(
        out_dir / "mobility_index.csv",
        ["date", "commune_id", "mob_in", "mob_out", "index"], rows,
    ))

    rows = [[cid, f"{flow.flows[cid]:.8f}"] for cid in sorted(flow.flows)]
    outputs.append(_write_csv(out_dir / "flow.csv",
                              ["commune_id", "flow"], rows))

    nodes, edges = od_graph(matrices)
    outputs.extend(write_od_graph(out_dir, nodes, edges))

    echo = {
        "risk_cutoff": str(cutoff),
        "risk_k": k,
        "normalization": constant,
        "flow_window": [str(flow.window[0]), str(flow.window[1])],
    }
    extra = {"risk_set": sorted(risk), "index_constant": constant}
    return echo, inputs, outputs, extra


def _parse_k_range(text: str, n_units: int) -> "list[int]":
    try:
        if ".." in text:
            lo_s, hi_s = text.split("..", 1)
            lo, hi = int(lo_s), int(hi_s)
        else:
            lo = hi = int(text)
    except ValueError as exc:
        raise ConfigError(f"--k expects K or A..B, got {text!r}") from exc
    if not (2 <= lo <= hi <= n_units):
        raise ConfigError(
            f"k range {lo}..{hi} outside [2, {n_units}] for {n_units} units"
        )
    return list(range(lo, hi + 1))


def _stage_cluster(cfg, out_dir, args):
    region, inputs = _load_study(cfg)
    scores, hex_path = _score_panels(cfg, region)
    inputs.append(hex_path)
    series = [scores[cid] for cid in sorted(scores)]
    if len(series) < 2:
        raise ConfigError("clustering requires at least 2 communes with scores")

    dtw_cfg = DtwConfig(
        step_pattern=_get_str(cfg, "cluster", "step_pattern", "symmetric2"),
        window=_get_int(cfg, "cluster", "window", None),
        normalize=_get_bool(cfg, "cluster", "normalize", False),
    )
    dmatrix = distance_matrix(series, dtw_cfg, n_threads=args.threads)
    linkage = _get_str(cfg, "cluster", "linkage", "complete")
    dendro = hcluster(dmatrix, linkage=linkage)

    n = len(series)
    if args.k is not None:
        ks = _parse_k_range(args.k, n)
    else:
        lo = _get_int(cfg, "cluster", "k_min", 2)
        hi = _get_int(cfg, "cluster", "k_max", min(6, n))
        ks = _parse_k_range(f"{lo}..{hi}", n)

    outputs = []
    rows = [[n + t, a, b, repr(h)] for t, (a, b, h) in enumerate(dendro.merges)]
    outputs.append(_write_csv(out_dir / "dendrogram.csv",
                              ["merge", "a", "b", "height"], rows))

    solutions = {}
    sils = {}
    cvi_rows = []
    for k in ks:
        sol = cut(dendro, k, dmatrix, series=scores)
        solutions[k] = sol
        cvis = validity_indices(dmatrix, sol)
        sils[k] = cvis["Sil"]
        cvi_rows.append([k] + [
            _fmt(cvis[name], 4 if name == "SF" else 6) for name in CVI_NAMES
        ])
    outputs.append(_write_csv(out_dir / "cvi.csv",
                              ["k"] + list(CVI_NAMES), cvi_rows))

    # the partition written out is the best-Silhouette k (ties -> smaller k)
    best_k = max(ks, key=lambda k: (sils[k], -k))
    best = solutions[best_k]
    rows = [[cid, best.assignment[cid]] for cid in sorted(best.assignment)]
    outputs.append(_write_csv(out_dir / "clusters.csv",
                              ["unit", "label"], rows))

    echo = {
        "step_pattern": dtw_cfg.step_pattern,
        "window": dtw_cfg.window,
        "normalize": dtw_cfg.normalize,
        "linkage": linkage,
        "k_range": [ks[0], ks[-1]],
    }
    extra = {
        "chosen_k": best_k,
        "medoids": {str(lbl): mid for lbl, mid in
                    zip(sorted(set(best.assignment.values())), best.medoid_ids)},
        "silhouette": {str(k): round(sils[k], 6) for k in ks},
    }
    return echo, inputs, outputs, extra


def _stage_regress(cfg, out_dir, args):
    region, inputs = _load_study(cfg)
    scores, hex_path = _score_panels(cfg, region)
    inputs.append(hex_path)
    mob_in, mob_out, index, _constant, mob_inputs = _mobility_panels(cfg, region)
    inputs.extend(mob_inputs)
    od_path = _input_path(cfg, "od")
    matrices = read_od(od_path, known_communes=set(region.communes))
    inputs.append(od_path)
    risk, flow, cutoff, _k = _risk_and_flow(cfg, region, matrices)

    region = _merge_panels(
        region, scores, mob_in, mob_out, index,
        variables=(Variable.SCORE, Variable.MOB_IN, Variable.MOB_OUT,
                   Variable.MOBILITY_INDEX),
    )
    design = build_design(region, flow,
                          per_100k=_get_bool(cfg, "regress", "per_100k", False))
    report = ols_fit(design)
    outputs = list(write_fit_report(out_dir, report))

    echo = {
        "window": [str(flow.window[0]), str(flow.window[1])],
        "risk_cutoff": str(cutoff),
        "response": design.response,
    }
    extra = {
        "n_obs": report.n_obs,
        "r_squared": round(report.r_squared, 6),
        "dropped_units": list(design.dropped),
    }
    return echo, inputs, outputs, extra


def _stage_corr(cfg, out_dir, args):
    region, inputs = _load_study(cfg)
    mob_var = _get_str(cfg, "corr", "mobility_variable",
                       Variable.MOBILITY_INDEX.value)
    case_var = _get_str(cfg, "corr", "case_variable",
                        Variable.CUM_CASES_PER_100K.value)
    if mob_var == Variable.SCORE.value:
        panels, hex_path = _score_panels(cfg, region)
        inputs.append(hex_path)
        region = _merge_panels(region, panels, variables=(Variable.SCORE,))
    else:
        mob_in, mob_out, index, _constant, mob_inputs = _mobility_panels(cfg, region)
        inputs.extend(mob_inputs)
        region = _merge_panels(
            region, mob_in, mob_out, index,
            variables=(Variable.MOB_IN, Variable.MOB_OUT,
                       Variable.MOBILITY_INDEX),
        )

    evolution, counts = cross_sectional_corr(region, mob_var, case_var)
    dates = region.date_index.dates()
    rows = []
    for t, day in enumerate(dates):
        r = "" if evolution.missing[t] else _fmt(evolution.values[t])
        rows.append([day.isoformat(), r, int(counts[t])])
    outputs = [_write_csv(out_dir / "corr_evolution.csv",
                          ["date", "r", "n"], rows)]

    units, matrix = mobility_corr_matrix(region, variable=mob_var)
    rows = [[u] + [_fmt(matrix[i, j]) for j in range(len(units))]
            for i, u in enumerate(units)]
    outputs.append(_write_csv(out_dir / "corr_matrix.csv",
                              ["unit"] + list(units), rows))

    echo = {"mobility_variable": mob_var, "case_variable": case_var}
    finite = evolution.values[~evolution.missing]
    extra = {
        "dates_with_r": int(np.sum(~evolution.missing)),
        "max_r": round(float(finite.max()), 6) if finite.size else None,
        "min_r": round(float(finite.min()), 6) if finite.size else None,
    }
    return echo, inputs, outputs, extra


def _stage_scm(cfg, out_dir, args):
    region, inputs = _load_study(cfg)
    outcome = _get_str(cfg, "scm", "outcome", "new_cases_smoothed_per_100k")
    pre = _get_int(cfg, "scm", "pre_window", 42)
    post = _get_int(cfg, "scm", "post_window", 28)
    lam = _get_float(cfg, "scm", "lambda", None)
    kind = InterventionKind.PHASE2_TRANSITION.value

    treated_raw = _raw(cfg, "scm", "treated", None)
    days = {cid: region.treatment_day(cid, kind) for cid in region.communes}
    if treated_raw:
        treated_ids = [t.strip() for t in treated_raw.split(",") if t.strip()]
        unknown = set(treated_ids) - set(region.communes)
        if unknown:
            raise ConfigError(f"[scm] treated has unknown communes {sorted(unknown)}")
        never = [cid for cid in treated_ids if days[cid] is None]
        if never:
            raise ConfigError(f"[scm] treated communes never reopen: {never}")
    else:
        treated_ids = [cid for cid in sorted(region.communes)
                       if days[cid] is not None]
        if not treated_ids:
            raise ConfigError("no commune has a reopening entry in the schedule")
    treated = {cid: days[cid] for cid in treated_ids}
    donors = frozenset(region.communes) - set(treated_ids)
    donor_days = {cid: days[cid] for cid in donors}

    labels = None
    if _get_bool(cfg, "scm", "same_cluster", False):
        cluster_path = Path(_get_str(cfg, "scm", "clusters",
                                     str(out_dir / "clusters.csv")))
        if not cluster_path.exists():
            raise ConfigError(
                f"[scm] same_cluster needs a clusters file; "
                f"{cluster_path} does not exist (run the cluster stage first)"
            )
        labels = {}
        with open(cluster_path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                labels[row["unit"]] = int(row["label"])
        inputs.append(cluster_path)

    problem = ScmProblem(outcome, treated, donors,
                         pre_window=pre, post_window=post,
                         cluster_labels=labels)
    fit = staggered_ascm(region, problem, donor_days=donor_days,
                         fixed_lambda=lam)

    outputs = []
    rows = [[int(d), _fmt(fit.avg_gap[i]), int(fit.n_treated[i])]
            for i, d in enumerate(fit.event_days)]
    outputs.append(_write_csv(out_dir / "gap.csv",
                              ["event_day", "avg_gap", "n_treated"], rows))

    rows = []
    for unit in sorted(fit.fits):
        unit_fit = fit.fits[unit]
        for donor in unit_fit.donor_ids:
            rows.append([unit, donor, f"{unit_fit.weights[donor]:.8f}"])
    outputs.append(_write_csv(out_dir / "weights.csv",
                              ["treated", "donor", "weight"], rows))

    placebo_rows = []
    placebo_extra = None
    if _get_bool(cfg, "scm", "placebo", True):
        try:
            placebo = placebo_distribution(region, problem,
                                           donor_days=donor_days,
                                           fixed_lambda=lam)
            placebo_rows = [[cid, _fmt(att)] for cid, att in
                            sorted(placebo.pseudo_atts.items())]
            placebo_extra = {"true_att": round(placebo.true_att, 6),
                             "rank": placebo.rank,
                             "n_placebos": len(placebo.pseudo_atts)}
        except ValueError as exc:
            logger.warning("placebo test skipped: %s", exc)
    outputs.append(_write_csv(out_dir / "placebo.csv",
                              ["donor", "pseudo_att"], placebo_rows))

    echo = {"outcome": outcome, "pre_window": pre, "post_window": post,
            "lambda": lam, "treated": sorted(treated),
            "same_cluster": labels is not None}
    extra = {
        "att": round(fit.att, 6),
        "excluded": list(fit.excluded),
        "lambdas": {u: round(f.lam, 8) for u, f in sorted(fit.fits.items())},
        "pre_rmse_ascm": {u: round(f.pre_rmse_ascm, 6)
                          for u, f in sorted(fit.fits.items())},
    }
    if placebo_extra:
        extra["placebo"] = placebo_extra
    return echo, inputs, outputs, extra


def _stage_simgen(cfg, out_dir, args):
    from . import simgen as sg

    seed = args.seed if args.seed is not None else _get_int(
        cfg, "simgen", "seed", 7)
    kwargs = {"seed": seed}
    n_days = _get_int(cfg, "simgen", "n_days", None)
    if n_days is not None:
        kwargs["n_days"] = n_days
    start = _get_date(cfg, "simgen", "start_date", None)
    if start is not None:
        kwargs["start_date"] = start
    try:
        config = sg.CityConfig(**kwargs)
        delta = _get_float(cfg, "simgen", "delta", None)
        lifting_day = _get_int(cfg, "simgen", "lifting_day", None)
        cohort_raw = _raw(cfg, "simgen", "cohort", None)
        if delta is not None or lifting_day is not None:
            cohort = None
            if cohort_raw:
                cohort = [t.strip() for t in cohort_raw.split(",") if t.strip()]
            config = sg.plant_lifting_effect(
                config, cohort=cohort, day=lifting_day,
                delta=20.0 if delta is None else delta,
            )
    except ValueError as exc:
        raise ConfigError(f"[simgen] {exc}") from exc

    data_dir = _get_str(cfg, "simgen", "out_dir", None)
    target = Path(data_dir) if data_dir else out_dir
    paths = sg.generate(config, target)

    echo = {"seed": seed, "n_days": config.n_days,
            "start_date": str(config.start_date),
            "out_dir": str(target),
            "delta": None if config.lifting is None else config.lifting.delta,
            "lifting_day": None if config.lifting is None else config.lifting.day}
    return echo, [], sorted(paths.values()), {"n_communes": config.n_communes}


_STAGES = {
    "validate": _stage_validate,
    "mobility": _stage_mobility,
    "cluster": _stage_cluster,
    "regress": _stage_regress,
    "corr": _stage_corr,
    "scm": _stage_scm,
    "simgen": _stage_simgen,
}


def _run_stage(name: str, cfg, out_dir: Path, args) -> Path:
    tap = _WarningTap()
    root = logging.getLogger("mobiscope")
    root.addHandler(tap)
    try:
        echo, inputs, outputs, extra = _STAGES[name](cfg, out_dir, args)
    finally:
        root.removeHandler(tap)
    manifest = _write_manifest(out_dir, name, echo, inputs, outputs,
                               tap.messages, extra)
    logger.info("stage %s complete (%d outputs)", name, len(outputs))
    return manifest


# ---------------------------------------------------------------------------
# entry point


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mobiscope",
        description="Epidemic-mobility analytics pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*RUN_ALL, "simgen", "run-all"):
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", required=True, help="INI configuration file")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--threads", type=int, default=1,
                       help="worker thread cap")
        p.add_argument("--seed", type=int, default=None,
                       help="override the configured seed")
        if name in ("cluster", "run-all"):
            p.add_argument("--k", default=None,
                           help="cluster count K or range A..B")
    return parser


def main(argv: "list[str] | None" = None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        _setup_logging()
        cfg = load_config(args.config)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        if not hasattr(args, "k"):
            args.k = None

        if args.command == "run-all":
            for stage in RUN_ALL:
                try:
                    _run_stage(stage, cfg, out_dir, args)
                except Exception as exc:
                    print(f"run-all: stage {stage!r} failed: {exc}",
                          file=sys.stderr)
                    raise
        else:
            _run_stage(args.command, cfg, out_dir, args)
        return 0
    except (ConfigError, SchemaError, FileNotFoundError) as exc:
        print(f"mobiscope: {exc}", file=sys.stderr)
        return 2
    except BrokenPipeError:
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"mobiscope: internal error: {exc}", file=sys.stderr)
        logger.debug("traceback", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
