"""Tests for the simplex solver and augmented synthetic-control fits."""

import datetime
import logging

import numpy as np
import pytest

from mobiscope.core import (
    Commune,
    DateIndex,
    PanelSeries,
    StudyRegion,
    Variable,
)
from mobiscope.synthctl import (
    KKT_TOL,
    OUTCOME_NEW_CASES,
    PlaceboResult,
    ScmProblem,
    ascm_fit,
    choose_lambda,
    kkt_residual,
    lambda_grid,
    placebo_distribution,
    scm_weights,
    staggered_ascm,
)

from helpers import simplex_qp_min

DAY0 = datetime.date(2020, 3, 1)


# ---------------------------------------------------------------------------
# simplex-constrained least squares

def test_random_problems_satisfy_kkt():
    rng = np.random.default_rng(230)
    for _ in range(30):
        t = int(rng.integers(2, 12))
        j = int(rng.integers(1, 10))
        X0 = rng.normal(size=(t, j)) * rng.uniform(0.5, 20)
        x1 = rng.normal(size=t) * rng.uniform(0.5, 20)
        w = scm_weights(x1, X0)
        assert kkt_residual(x1, X0, w) <= KKT_TOL
        assert simplex_qp_min(x1, X0, w) <= 1e-7
        assert w.min() >= -1e-12
        assert w.sum() == pytest.approx(1.0, abs=1e-12)


def test_exact_match_donor_takes_all_weight():
    x1 = np.array([3.0, 1.0, 4.0])
    X0 = np.column_stack([x1, [9.0, 9.0, 9.0], [-2.0, 0.0, 1.0]])
    w = scm_weights(x1, X0)
    np.testing.assert_allclose(w, [1.0, 0.0, 0.0], atol=1e-9)


def test_midpoint_target_splits_weight_evenly():
    X0 = np.array([[0.0, 2.0], [2.0, 0.0]])
    w = scm_weights(np.array([1.0, 1.0]), X0)
    np.testing.assert_allclose(w, [0.5, 0.5], atol=1e-9)


def test_target_outside_hull_snaps_to_nearest_vertex():
    X0 = np.array([[0.0, 1.0]])
    w = scm_weights(np.array([5.0]), X0)
    np.testing.assert_allclose(w, [0.0, 1.0], atol=1e-9)


def test_single_donor_gets_weight_one():
    w = scm_weights(np.array([1.0, 2.0]), np.array([[5.0], [6.0]]))
    np.testing.assert_allclose(w, [1.0])


def test_kkt_residual_flags_suboptimal_weights():
    X0 = np.array([[0.0, 1.0]])
    bad = np.array([0.5, 0.5])
    assert kkt_residual(np.array([5.0]), X0, bad) > KKT_TOL


# ---------------------------------------------------------------------------
# ridge penalty selection

def test_lambda_grid_spans_six_decades_of_variance():
    x1 = np.array([1.0, 3.0])
    X0 = np.array([[2.0, 0.0], [0.0, 2.0]])
    grid = lambda_grid(x1, X0)
    pooled_var = np.var([1.0, 3.0, 2.0, 0.0, 0.0, 2.0])
    assert grid[0] == pytest.approx(pooled_var * 1e-3)
    assert grid[-1] == pytest.approx(pooled_var * 1e3)
    assert len(grid) == 20
    flat = lambda_grid(np.ones(3), np.ones((3, 2)))
    assert flat[0] == pytest.approx(1e-3)  # zero variance falls back to 1


def test_choose_lambda_returns_grid_member_and_curve():
    rng = np.random.default_rng(9)
    X0_pre = rng.normal(size=(6, 4))
    X0_post = rng.normal(size=(3, 4))
    x1_pre = rng.normal(size=6)
    lam, curve = choose_lambda(x1_pre, X0_pre, X0_post)
    assert lam in curve
    assert curve[lam] == min(curve.values())
    grid = [0.5, 1.0, 2.0]
    lam2, curve2 = choose_lambda(x1_pre, X0_pre, X0_post, grid=grid)
    assert lam2 in grid and set(curve2) == set(grid)


def test_choose_lambda_ties_prefer_smaller_penalty():
    # identical donors make every penalty equivalent
    X0_pre = np.ones((4, 3))
    X0_post = np.ones((2, 3))
    lam, curve = choose_lambda(np.ones(4), X0_pre, X0_post, grid=[5.0, 1.0, 3.0])
    assert lam == 1.0


# ---------------------------------------------------------------------------
# region fixtures

def _metric_region(data, n_days=None):
    n_days = n_days or len(next(iter(data.values())))
    communes = {cid: Commune(cid, cid, 100_000, 0.5, False) for cid in data}
    panels = {
        (cid, "metric"): PanelSeries.complete(cid, "metric",
                                              np.asarray(arr, dtype=float))
        for cid, arr in data.items()
    }
    return StudyRegion(communes, DateIndex(DAY0, n_days), panels)


def _cases_region(new_cases_by_commune):
    """Region with cumulative case panels built from daily new cases."""
    n_days = len(next(iter(new_cases_by_commune.values())))
    communes = {
        cid: Commune(cid, cid, 100_000, 0.5, False)
        for cid in new_cases_by_commune
    }
    panels = {}
    for cid, daily in new_cases_by_commune.items():
        cum = np.cumsum(np.asarray(daily, dtype=float))
        panels[(cid, Variable.CUM_CASES.value)] = PanelSeries.complete(
            cid, Variable.CUM_CASES, cum)
    from mobiscope.core import add_case_derivatives
    region = StudyRegion(communes, DateIndex(DAY0, n_days), panels)
    return add_case_derivatives(region)


def _toy_problem(day=20, pre=10, post=8, **kwargs):
    rng = np.random.default_rng(53)
    n_days = 40
    base = 50 + 5 * np.sin(np.arange(n_days) / 4.0)
    data = {"t1": base + rng.normal(0, 0.5, n_days)}
    for i in range(5):
        data[f"d{i}"] = base + rng.normal(0, 0.5, n_days) + rng.uniform(-3, 3)
    region = _metric_region(data)
    problem = ScmProblem("metric", {"t1": day}, frozenset(data) - {"t1"},
                         pre_window=pre, post_window=post, **kwargs)
    return region, problem


# ---------------------------------------------------------------------------
# single-unit fits

def test_identical_donor_reproduces_raw_difference():
    n_days = 30
    base = np.linspace(10, 40, n_days)
    treated = base.copy()
    treated[20:] += 7.0
    # both decoys sit strictly above the target, so no mixture involving
    # them can reproduce the pre window and the matching donor is unique
    region = _metric_region({
        "t1": treated, "twin": base,
        "d1": base + 15.0, "d2": base + 9.0,
    })
    problem = ScmProblem("metric", {"t1": 20}, frozenset({"twin", "d1", "d2"}),
                         pre_window=10, post_window=10)
    fit = ascm_fit(region, problem, fixed_lambda=0.0)
    assert fit.weights["twin"] == pytest.approx(1.0, abs=1e-8)
    assert fit.pre_rmse_scm == pytest.approx(0.0, abs=1e-8)
    # synthetic equals the twin, so the effect is the raw post difference
    assert fit.att == pytest.approx(7.0, abs=1e-6)
    np.testing.assert_allclose(fit.gap.values[10:], 7.0, atol=1e-6)


def test_huge_penalty_recovers_plain_synthetic_control():
    region, problem = _toy_problem()
    plain = ascm_fit(region, problem, fixed_lambda=1e12)
    # with the ridge term saturated the augmentation vanishes
    assert plain.pre_rmse_ascm == pytest.approx(plain.pre_rmse_scm, abs=1e-6)
    outcomes = {c: region.panel(c, "metric").values for c in region.communes}
    X0_pre = np.column_stack([outcomes[d][10:20] for d in plain.donor_ids])
    w = scm_weights(outcomes["t1"][10:20], X0_pre)
    np.testing.assert_allclose(
        [plain.weights[d] for d in plain.donor_ids], w, atol=1e-6)


def test_zero_penalty_with_spanning_donors_zeroes_pre_gap():
    # six donors in a three-day pre window: the cross-donor regression is
    # exactly determined, so the augmented pre-treatment gap vanishes
    rng = np.random.default_rng(11)
    n_days = 12
    data = {"t1": rng.uniform(10, 60, n_days)}
    for i in range(6):
        data[f"d{i}"] = rng.uniform(10, 60, n_days)
    region = _metric_region(data)
    problem = ScmProblem("metric", {"t1": 5}, frozenset(data) - {"t1"},
                         pre_window=3, post_window=4)
    fit = ascm_fit(region, problem, fixed_lambda=0.0)
    assert fit.pre_rmse_ascm == pytest.approx(0.0, abs=1e-8)


def test_augmentation_never_worsens_pre_fit():
    region, problem = _toy_problem()
    for lam in (0.0, 0.3, 5.0, 1e4):
        fit = ascm_fit(region, problem, fixed_lambda=lam)
        assert fit.pre_rmse_ascm <= fit.pre_rmse_scm + 1e-10


def test_fit_is_invariant_to_panel_insertion_order():
    region, problem = _toy_problem()
    shuffled = StudyRegion(
        dict(reversed(list(region.communes.items()))),
        region.date_index,
        dict(reversed(list(region.panels.items()))),
        region.schedule,
    )
    a = ascm_fit(region, problem, fixed_lambda=1.0)
    b = ascm_fit(shuffled, problem, fixed_lambda=1.0)
    assert a.donor_ids == b.donor_ids
    for d in a.donor_ids:
        assert a.weights[d] == pytest.approx(b.weights[d], abs=1e-10)
    assert a.att == pytest.approx(b.att, abs=1e-10)


def test_unhappy_fits_raise():
    region, problem = _toy_problem()
    with pytest.raises(ValueError, match="fewer than 10 pre days"):
        ascm_fit(region, ScmProblem("metric", {"t1": 4},
                                    problem.donors, pre_window=10,
                                    post_window=5))
    with pytest.raises(ValueError, match="donor"):
        ascm_fit(region, problem,
                 donor_days={d: 0 for d in problem.donors})
    with pytest.raises(ValueError):
        ScmProblem("metric", {"t1": 20}, frozenset({"t1", "d0"}))
    with pytest.raises(ValueError):
        ScmProblem("metric", {}, frozenset({"d0"}))
    with pytest.raises(ValueError):
        ScmProblem("metric", {"t1": -3}, frozenset({"d0"}))


def test_donors_with_own_treatment_in_window_are_dropped():
    region, problem = _toy_problem(day=20, post=8)
    fit = ascm_fit(region, problem, fixed_lambda=1.0,
                   donor_days={"d0": 22, "d1": 40, "d2": None})
    assert "d0" not in fit.donor_ids      # treated inside the post window
    assert "d1" in fit.donor_ids          # treated after it closes
    assert "d2" in fit.donor_ids


def test_cluster_labels_restrict_the_donor_pool():
    region, problem = _toy_problem()
    labels = {"t1": 2, "d0": 2, "d3": 2, "d1": 1, "d2": 1, "d4": 1}
    restricted = ScmProblem(problem.outcome, problem.treated, problem.donors,
                            problem.pre_window, problem.post_window,
                            cluster_labels=labels)
    fit = ascm_fit(region, restricted, fixed_lambda=1.0)
    assert set(fit.donor_ids) == {"d0", "d3"}


# ---------------------------------------------------------------------------
# the smoothed-cases outcome must not leak post-treatment data

def test_pre_window_fit_ignores_post_treatment_outcomes():
    rng = np.random.default_rng(6)
    n_days, day = 60, 30
    daily = {f"d{i}": rng.integers(20, 60, n_days) for i in range(4)}
    base = rng.integers(20, 60, n_days)
    calm, wild = base.copy(), base.copy()
    wild[day:] += 500  # an explosive post period must not alter pre gaps
    problem = ScmProblem(OUTCOME_NEW_CASES, {"t1": day},
                         frozenset(daily), pre_window=15, post_window=15)
    fit_calm = ascm_fit(_cases_region({"t1": calm, **daily}), problem,
                        fixed_lambda=1.0)
    fit_wild = ascm_fit(_cases_region({"t1": wild, **daily}), problem,
                        fixed_lambda=1.0)
    assert fit_calm.weights == fit_wild.weights
    assert fit_calm.pre_rmse_ascm == pytest.approx(fit_wild.pre_rmse_ascm,
                                                   abs=1e-12)
    np.testing.assert_allclose(fit_calm.gap.values[:15],
                               fit_wild.gap.values[:15], atol=1e-12)


# ---------------------------------------------------------------------------
# staggered cohorts

def test_single_treated_staggered_equals_direct_fit():
    region, problem = _toy_problem()
    direct = ascm_fit(region, problem, fixed_lambda=1.0)
    stag = staggered_ascm(region, problem, fixed_lambda=1.0)
    assert stag.att == pytest.approx(direct.att)
    assert list(stag.event_days) == list(range(-10, 8))
    np.testing.assert_allclose(stag.avg_gap, direct.gap.values)
    assert (stag.n_treated == 1).all()


def test_identical_treated_pair_averages_to_either():
    n_days = 40
    base = np.linspace(5, 50, n_days)
    twin = base + 1.0
    data = {"t1": twin, "t2": twin.copy()}
    rng = np.random.default_rng(2)
    for i in range(4):
        data[f"d{i}"] = base + rng.uniform(-2, 2)
    region = _metric_region(data)
    problem = ScmProblem("metric", {"t1": 20, "t2": 20},
                         frozenset(data) - {"t1", "t2"},
                         pre_window=10, post_window=10)
    stag = staggered_ascm(region, problem, fixed_lambda=1.0)
    assert stag.att == pytest.approx(stag.fits["t1"].att)
    assert stag.att == pytest.approx(stag.fits["t2"].att)


def test_staggered_excludes_impossible_units(caplog):
    region, problem = _toy_problem()
    mixed = ScmProblem("metric", {"t1": 20, "d4": 2},
                       frozenset({"d0", "d1", "d2", "d3"}),
                       pre_window=10, post_window=8)
    with caplog.at_level(logging.WARNING):
        stag = staggered_ascm(region, mixed, fixed_lambda=1.0)
    assert stag.excluded == ("d4",)
    assert set(stag.fits) == {"t1"}
    hopeless = ScmProblem("metric", {"d4": 2}, frozenset({"d0"}),
                          pre_window=10, post_window=8)
    with pytest.raises(ValueError, match="no treated commune"):
        staggered_ascm(region, hopeless, fixed_lambda=1.0)


def test_named_cohort_against_named_donors():
    cohort = ["Recoleta", "San Ramon", "La Cisterna", "La Granja",
              "San Joaquin", "San Miguel"]
    donors = ["Quinta Normal", "La Pintana", "Lo Prado", "Cerro Navia",
              "Conchali", "Puente Alto", "Lo Espejo"]
    rng = np.random.default_rng(14)
    n_days = 50
    base = 30 + 10 * np.sin(np.arange(n_days) / 5.0)
    data = {name: base + rng.normal(0, 1.0, n_days) for name in cohort + donors}
    region = _metric_region(data)
    problem = ScmProblem("metric", {name: 30 for name in cohort},
                         frozenset(donors), pre_window=15, post_window=10)
    stag = staggered_ascm(region, problem, fixed_lambda=1.0)
    assert set(stag.fits) == set(cohort)
    assert np.isfinite(stag.avg_gap).all()


# ---------------------------------------------------------------------------
# placebo tests

def test_placebo_yields_one_pseudo_att_per_donor():
    region, problem = _toy_problem()
    result = placebo_distribution(region, problem, fixed_lambda=1.0)
    assert isinstance(result, PlaceboResult)
    assert set(result.pseudo_atts) == set(problem.donors)
    assert 1 <= result.rank <= len(problem.donors) + 1


def test_placebo_with_three_donors_runs_and_fewer_fails():
    n_days = 30
    rng = np.random.default_rng(8)
    data = {c: rng.uniform(10, 20, n_days) for c in ("t1", "d0", "d1", "d2")}
    region = _metric_region(data)
    problem = ScmProblem("metric", {"t1": 15}, frozenset({"d0", "d1", "d2"}),
                         pre_window=8, post_window=8)
    result = placebo_distribution(region, problem, fixed_lambda=1.0)
    assert len(result.pseudo_atts) == 3
    small = ScmProblem("metric", {"t1": 15}, frozenset({"d0", "d1"}),
                       pre_window=8, post_window=8)
    with pytest.raises(ValueError, match="3 donors"):
        placebo_distribution(region, small, fixed_lambda=1.0)


def test_planted_effect_ranks_first():
    rng = np.random.default_rng(77)
    n_days = 60
    base = 40 + 6 * np.sin(np.arange(n_days) / 6.0)
    data = {"t1": base + rng.normal(0, 0.3, n_days)}
    data["t1"][30:] += 25.0
    for i in range(8):
        data[f"d{i}"] = base + rng.normal(0, 0.3, n_days)
    region = _metric_region(data)
    problem = ScmProblem("metric", {"t1": 30}, frozenset(data) - {"t1"},
                         pre_window=15, post_window=15)
    result = placebo_distribution(region, problem, fixed_lambda=1.0)
    assert result.rank == 1
    assert result.true_att == pytest.approx(25.0, rel=0.1)


def test_placebo_skips_donors_that_are_not_clean(caplog):
    region, problem = _toy_problem(day=20, post=8)
    with caplog.at_level(logging.WARNING):
        result = placebo_distribution(region, problem, fixed_lambda=1.0,
                                      donor_days={"d0": 21})
    assert "d0" not in result.pseudo_atts
    assert set(result.pseudo_atts) == {"d1", "d2", "d3", "d4"}
    assert any("placebo fit skipped for donor d0" in r.message
               for r in caplog.records)
