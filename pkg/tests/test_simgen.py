"""Tests for the synthetic-city generator: invariants and planted signals."""

import dataclasses
import json

import numpy as np
import pytest

from mobiscope.core import Variable, treatment_day
from mobiscope.ingest import load_region
from mobiscope.mobility import mobility_indices
from mobiscope.simgen import (
    ArchetypeSpec,
    CityConfig,
    EpidemicParams,
    LiftingPlan,
    NoiseParams,
    as_region,
    cross_section,
    generate,
    hex_records,
    od_matrices,
    plant_lifting_effect,
    simulate,
    _transition_log,
)

MINI_ARCHETYPES = (
    ArchetypeSpec("rural", 2, (0.10, 0.30), (8_000, 20_000), (0.04, 0.10),
                  6.0, is_rural=True),
    ArchetypeSpec("low", 3, (0.25, 0.45), (90_000, 150_000), (0.24, 0.38),
                  14.0, lock_day=20, phase2_day=70),
    ArchetypeSpec("mid", 3, (0.45, 0.68), (60_000, 120_000), (0.20, 0.34),
                  20.0, lock_day=15, phase2_day=80),
    ArchetypeSpec("high", 3, (0.74, 0.98), (40_000, 90_000), (0.12, 0.24),
                  28.0, lock_day=10, phase2_day=50),
)


def _mini(seed=5, **kwargs):
    return CityConfig(n_days=90, archetypes=MINI_ARCHETYPES,
                      hexes_per_commune=2, seed=seed, **kwargs)


def _populations(sim):
    return np.array([sim.communes[c].population for c in sim.commune_ids])


# ---------------------------------------------------------------------------
# hard invariants of the latent epidemic

def test_population_is_conserved_bitwise():
    sim = simulate(_mini())
    pops = _populations(sim).astype(float)
    total = sim.S + sim.E + sim.I + sim.R
    assert (total == pops[None, :]).all()


def test_compartments_stay_non_negative():
    for seed in (1, 2, 3):
        sim = simulate(_mini(seed=seed))
        for arr in (sim.S, sim.E, sim.I, sim.R):
            assert (arr >= 0.0).all()


def test_cumulative_outputs_never_decrease():
    sim = simulate(_mini())
    assert (np.diff(sim.emitted_cum, axis=0) >= 0.0).all()
    assert (np.diff(sim.counterfactual_cum, axis=0) >= -1e-9).all()
    region = as_region(sim)
    for cid in sim.commune_ids:
        series = region.panel(cid, Variable.CUM_CASES)
        vals = series.values[~series.missing]
        assert (np.diff(vals) >= 0.0).all()


def test_same_config_is_deterministic():
    a = simulate(_mini())
    b = simulate(_mini())
    assert (a.emitted_cum == b.emitted_cum).all()
    assert (a.hex_counts == b.hex_counts).all()
    assert (a.od_counts == b.od_counts).all()
    assert a.ground_truth.to_json() == b.ground_truth.to_json()


def test_generated_files_are_byte_identical(tmp_path):
    cfg = _mini()
    paths_a = generate(cfg, tmp_path / "a")
    paths_b = generate(cfg, tmp_path / "b")
    assert set(paths_a) == {"socio", "cases", "hex_scores", "od",
                            "transitions", "antennas", "schedule",
                            "ground_truth"}
    for key in paths_a:
        assert paths_a[key].read_bytes() == paths_b[key].read_bytes(), key
    other = generate(_mini(seed=6), tmp_path / "c")
    assert other["cases"].read_bytes() != paths_a["cases"].read_bytes()


def test_more_transmission_means_more_infections():
    sizes = []
    for beta in (0.18, 0.30, 0.45):
        cfg = _mini()
        cfg = dataclasses.replace(cfg, epidemic=EpidemicParams(beta=beta))
        sim = simulate(cfg)
        pops = _populations(sim)
        sizes.append(float((pops - sim.S[-1]).sum()))
    assert sizes[0] <= sizes[1] <= sizes[2]


def test_zero_coupling_confines_the_seed():
    archetypes = tuple(
        dataclasses.replace(a, commute_share=(0.0, 0.0))
        for a in MINI_ARCHETYPES
    )
    cfg = CityConfig(n_days=60, archetypes=archetypes, hexes_per_commune=2,
                     seed=3, seed_communes=1)
    sim = simulate(cfg)
    pops = _populations(sim).astype(float)
    ever = pops - sim.S[-1]
    incomes = [sim.communes[c].income_index for c in sim.commune_ids]
    seeded = int(np.argmax(incomes))
    assert ever[seeded] > 0.0
    others = np.delete(ever, seeded)
    assert (others == 0.0).all()


def test_subcritical_epidemic_plateaus_near_the_seeds():
    cfg = dataclasses.replace(
        _mini(), epidemic=EpidemicParams(beta=0.005, gamma=0.1))
    sim = simulate(cfg)
    pops = _populations(sim).astype(float)
    ever = float((pops - sim.S[-1]).sum())
    incomes = np.array([sim.communes[c].income_index
                        for c in sim.commune_ids])
    seeds = np.argsort(-incomes)[: cfg.seed_communes]
    seeded = float(sum(min(cfg.seed_size * pops[i] / 1e5, pops[i] - 1)
                       for i in seeds))
    assert seeded <= ever <= 1.2 * seeded


# ---------------------------------------------------------------------------
# the rich-first, poor-later narrative of the default city

def test_case_rates_start_income_positive_and_end_income_negative():
    sim = simulate(CityConfig())
    pops = _populations(sim)
    rates = sim.emitted_cum / pops[None, :] * 1e5
    income = np.array([sim.communes[c].income_index
                       for c in sim.commune_ids])
    early = np.corrcoef(income, rates[40])[0, 1]
    late = np.corrcoef(income, rates[-1])[0, 1]
    assert early > 0.15
    assert late < 0.0


# ---------------------------------------------------------------------------
# planted reopening effects

def test_default_plan_targets_third_archetype():
    cfg = plant_lifting_effect(CityConfig())
    plan = cfg.lifting
    assert plan.cohort == ("c25", "c26", "c27", "c28", "c29", "c30")
    assert plan.day == 205
    assert plan.delta == 20.0
    with pytest.raises(ValueError, match="unknown cohort"):
        plant_lifting_effect(CityConfig(), cohort=["nope"], day=100)
    with pytest.raises(ValueError):
        LiftingPlan((), 100)


def test_donors_are_held_away_from_the_lifting_day():
    sim = simulate(plant_lifting_effect(CityConfig()))
    kind = "phase2_transition"
    assert treatment_day(sim.schedule, "c25", kind) == 205
    # same-archetype donors and any commune inside the +/-40 day corridor
    # reopen only after the post window has fully closed
    assert treatment_day(sim.schedule, "c31", kind) == 245
    assert treatment_day(sim.schedule, "c24", kind) == 245
    # far-away reopenings are untouched
    assert treatment_day(sim.schedule, "c39", kind) == 148


def test_zero_delta_changes_nothing_and_delta_adds_exactly():
    base = _mini(noise=NoiseParams(case_noise=0.0))
    cohort, day = ("c06", "c07"), 55
    cfg0 = plant_lifting_effect(base, cohort=cohort, day=day, delta=0.0)
    cfg20 = plant_lifting_effect(base, cohort=cohort, day=day, delta=20.0)
    sim0, sim20 = simulate(cfg0), simulate(cfg20)
    ids = list(sim0.commune_ids)
    pops = _populations(sim0).astype(float)
    for i, cid in enumerate(ids):
        a = sim0.reported_float[:, i]
        b = sim20.reported_float[:, i]
        if cid not in cohort:
            assert (a == b).all()
            continue
        np.testing.assert_allclose(b[:day], a[:day], atol=1e-9)
        # noiseless daily gap after the lifting day is delta per 100k, so
        # the cumulative gap is an exact ramp
        gap_per_100k = (b - a) * 1e5 / pops[i]
        expected = np.maximum(np.arange(cfg0.n_days) - day + 1, 0) * 20.0
        np.testing.assert_allclose(gap_per_100k, expected, atol=1e-6)


def test_zero_delta_with_noise_matches_unplanted_cohort_free_columns():
    base = _mini()
    cfg0 = plant_lifting_effect(base, cohort=("c06",), day=55, delta=0.0)
    cfg20 = plant_lifting_effect(base, cohort=("c06",), day=55, delta=20.0)
    sim0, sim20 = simulate(cfg0), simulate(cfg20)
    i = list(sim0.commune_ids).index("c06")
    others = [j for j in range(len(sim0.commune_ids)) if j != i]
    assert (sim0.emitted_cum[:, others] == sim20.emitted_cum[:, others]).all()
    assert (sim0.emitted_cum[:55, i] == sim20.emitted_cum[:55, i]).all()
    assert sim20.emitted_cum[-1, i] > sim0.emitted_cum[-1, i]


def test_ground_truth_records_the_plant():
    sim = simulate(plant_lifting_effect(_mini(), cohort=("c06",), day=55,
                                        delta=12.5))
    truth = json.loads(sim.ground_truth.to_json())
    assert truth["delta"] == 12.5
    assert truth["cohort"] == ["c06"]
    assert truth["lifting_day"] == 55
    assert set(truth["labels"]) == set(sim.commune_ids)
    assert set(truth["trajectories"]["c06"]) == {"S", "E", "I", "R"}
    bare = simulate(_mini())
    assert json.loads(bare.ground_truth.to_json())["delta"] is None


# ---------------------------------------------------------------------------
# emission layer

def test_emitted_files_load_back_into_a_region(tmp_path):
    cfg = _mini()
    paths = generate(cfg, tmp_path)
    region = load_region(paths["socio"], paths["cases"], paths["schedule"])
    assert len(region.communes) == cfg.n_communes
    assert region.date_index.n_days == cfg.n_days
    assert region.treatment_day("c09", "phase2_transition") == 50


def test_transition_log_realizes_the_planted_counts():
    sim = simulate(_mini())
    log = _transition_log(sim)
    mob_in, mob_out = mobility_indices(log, sim.date_index)
    for i, cid in enumerate(sim.commune_ids):
        np.testing.assert_array_equal(mob_in[cid].values,
                                      sim.in_counts[:, i].astype(float))
        np.testing.assert_array_equal(mob_out[cid].values,
                                      sim.out_counts[:, i].astype(float))


def test_hex_records_and_od_matrices_are_well_formed():
    sim = simulate(_mini())
    records = hex_records(sim)
    assert len(records) == sim.date_index.n_days * len(sim.hex_ids)
    assert all(r.displacements >= 1 for r in records)
    matrices = od_matrices(sim)
    slots = {m.slot for m in matrices}
    assert slots <= {"06:00", "06:30", "07:00", "07:30", "17:00", "17:30"}
    total = sum(m.total_trips() for m in matrices)
    assert total == int(sim.od_counts.sum())


def test_region_panels_cover_every_commune():
    sim = simulate(_mini())
    region = as_region(sim)
    for cid in sim.commune_ids:
        for var in (Variable.SCORE, Variable.MOB_IN, Variable.MOB_OUT,
                    Variable.MOBILITY_INDEX, Variable.CUM_CASES,
                    Variable.CUM_CASES_PER_100K, Variable.NEW_CASES):
            assert region.has_panel(cid, var.value), (cid, var)
    score = region.panel("c01", Variable.SCORE)
    present = score.values[~score.missing]
    assert ((0.0 <= present) & (present <= 100.0)).all()


def test_cross_section_is_reproducible_and_planted():
    sim = simulate(_mini())
    d1 = cross_section(sim, seed=123)
    d2 = cross_section(sim, seed=123)
    d3 = cross_section(sim, seed=124)
    assert (d1.y == d2.y).all()
    assert not (d1.y == d3.y).all()
    assert (d1.X == d2.X).all()
    assert d1.n == sim.config.n_communes
    beta = np.array(sim.config.regression.beta)
    noise = d1.y - d1.X @ beta
    sd = sim.config.regression.noise_sd
    assert abs(float(noise.mean())) < 5 * sd / np.sqrt(d1.n)


def test_config_validation():
    with pytest.raises(ValueError):
        CityConfig(n_days=10)
    with pytest.raises(ValueError):
        CityConfig(od_scale=0.0)
    with pytest.raises(ValueError):
        ArchetypeSpec("x", 0, (0.1, 0.2), (10, 20), (0.1, 0.2), 5.0)
    with pytest.raises(ValueError):
        ArchetypeSpec("x", 1, (0.1, 0.2), (10, 20), (0.5, 1.0), 5.0)
    with pytest.raises(ValueError):
        EpidemicParams(beta=0.0)
    with pytest.raises(ValueError):
        NoiseParams(report_rate=0.0)
