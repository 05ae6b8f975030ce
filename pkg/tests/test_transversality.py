import math

import numpy as np
import pytest

from app.config import ScenarioConfig
from app.errors import EmptyRegion, ScheduleInfeasible, TransversalityNotAchieved
from app.geometry.bundle_sections import ChartPolynomial, ModelChart, equivariant_average, peak_section
from app.geometry.lattice import build_domain_lattices
from app.geometry.strata import build_strata
from app.geometry.transversality import (
    LocalSamples,
    admissible_eta0,
    candidate_values,
    certify_eta,
    chart_grid,
    compute_schedule,
    eta_recursion,
    globalize,
    lattice_family_count,
    local_samples,
    local_spacing,
    local_transverse_value,
    measure_eta,
    plan_perturbation,
    q_p,
    restricted_margin,
    sampled_transversality,
    schedule_violations,
    torus_grid,
    xalpha_sweep,
)
from app.presets import build_domain


@pytest.fixture
def bounded_chart():
    return ModelChart(1, 20, chart_radius=3.0)


def test_eta_recursion_first_step():
    logs = eta_recursion(math.log(100.0), 1, p=3, R=1.0)
    assert math.exp(-logs[1]) == pytest.approx(5.12e-5, rel=0.01)


def test_q_p_and_admissibility():
    assert q_p(math.exp(-2.0), 3) == pytest.approx(1.0 / 8.0)
    assert admissible_eta0(1.0, 3) == pytest.approx(math.exp(-(2.0 ** (1.0 / 3.0))))


def test_unbounded_chart_needs_radius():
    with pytest.raises(EmptyRegion):
        chart_grid(ModelChart(1, 20), 0.25)


def test_torus_grid_tiles_fundamental_domain(t2_z2):
    grid = torus_grid(t2_z2, 40, 0.25)
    count = int(math.ceil(math.sqrt(80 * math.pi) / 0.25))
    assert len(grid.points) == count**2
    assert grid.cover_radius <= 0.25 * math.sqrt(2) / 2 + 1e-12


def test_coordinate_section_has_eta_one(bounded_chart):
    section = ChartPolynomial.coordinate(bounded_chart)
    measured = measure_eta(section, grid_spacing=0.25)
    assert measured.eta_star == pytest.approx(1.0)


def test_certificate_statuses(bounded_chart):
    section = ChartPolynomial.coordinate(bounded_chart)
    assert certify_eta(section, eta=0.5).status == "certified"
    failed = certify_eta(section, eta=2.0)
    assert failed.status == "failed"
    assert np.abs(failed.witness[0]) * section.scale < 2.0
    inconclusive = certify_eta(section, eta=0.9, L0=10.0, L1=10.0, max_refine=0)
    assert inconclusive.status == "inconclusive"
    assert inconclusive.to_json()["region"]["kind"] == "chart"


def test_refinement_rescues_a_tight_margin(bounded_chart):
    section = ChartPolynomial.coordinate(bounded_chart)
    cert = certify_eta(section, eta=0.9, L0=1.0, L1=1.0, max_refine=3)
    assert cert.certified
    assert cert.refinements >= 1


def test_candidates_start_at_origin():
    cands = candidate_values(0.1)
    assert cands[0] == 0
    assert np.all(np.abs(cands) <= 0.1 + 1e-12)


def test_local_value_avoids_critical_value():
    ticks = np.linspace(-1.0, 1.0, 81)
    z = (ticks[:, None] + 1j * ticks[None, :]).ravel()
    samples = LocalSamples(z**2, 2.0 * np.abs(z))
    choice = local_transverse_value(samples, sigma=1e-3, delta=0.1)
    assert 0 < abs(choice.w) <= 0.1 + 1e-12
    assert choice.achieved_sigma > 0
    assert choice.verified_sigma == pytest.approx(sampled_transversality(samples, choice.w))
    assert choice.verified_sigma > sampled_transversality(samples, 0j)


def test_local_value_without_room_stays_put():
    samples = LocalSamples(np.array([0j]), np.array([0.0]))
    choice = local_transverse_value(samples, sigma=0.0, delta=0.0)
    assert choice.w == 0


def test_local_samples_of_the_peak_are_flat(plain_chart):
    peak = peak_section(plain_chart, np.array([0.05j]), 20)
    samples = local_samples(peak, peak.center, 1.0, local_spacing(1, 1.0))
    assert np.allclose(samples.values, 1.0)
    assert np.max(samples.gradient_norms) < 1e-9


def test_local_spacing_defaults():
    assert local_spacing(1, 5.0) == pytest.approx(0.1)
    assert local_spacing(2, 5.0) == pytest.approx(1.0)
    assert local_spacing(2, 5.0, override=0.3) == 0.3


def test_restricted_margin_without_directions(bounded_chart):
    section = ChartPolynomial.coordinate(bounded_chart)
    pts = np.array([[0.0j], [0.1 + 0j]])
    assert np.allclose(restricted_margin(section, pts, np.zeros((0, 1))), np.abs(pts[:, 0]) * section.scale)


@pytest.mark.parametrize("fixture", ["t2_z2", "t4_z2"])
def test_schedule_is_sound(fixture, request):
    poset = build_strata(request.getfixturevalue(fixture))
    schedule = compute_schedule(poset)
    assert schedule_violations(schedule, poset) == []
    assert schedule.processing_order[0] == poset.max_index
    top = schedule.for_stratum(poset.max_index)
    assert all(b > a for a, b in zip(top.log_inv_eta, top.log_inv_eta[1:]))
    for index in schedule.processing_order[1:]:
        assert schedule.for_stratum(index).R > 2.0 * top.C * top.D


def test_schedule_rejects_bad_exponent(t2_z2):
    with pytest.raises(ScheduleInfeasible) as info:
        compute_schedule(build_strata(t2_z2), p=0)
    assert info.value.clause == "admissibility"


def test_schedule_reports_size_clause(t4_z2):
    with pytest.raises(ScheduleInfeasible) as info:
        compute_schedule(build_strata(t4_z2), D_start=1.0, D_max=1.5)
    assert info.value.clause == "final_size"


def test_sweep_constant_is_positive():
    sweep = xalpha_sweep(p=3, D_values=(5.0, 10.0, 20.0))
    assert sweep["constant"] > 0
    assert [row["D"] for row in sweep["rows"]] == [5.0, 10.0, 20.0]


def test_constant_section_eta(bounded_chart):
    assert measure_eta(ChartPolynomial.constant(bounded_chart, 0.3)).eta_star == pytest.approx(0.3)
    assert measure_eta(ChartPolynomial.constant(bounded_chart, 0.0)).eta_star == 0.0


def test_certificate_with_given_constants(bounded_chart):
    section = ChartPolynomial.coordinate(bounded_chart)
    region = chart_grid(bounded_chart, 0.1 * math.sqrt(2.0), radius_gk=1.0)
    cert = certify_eta(section, region, eta=0.5, grid_spacing=0.1 * math.sqrt(2.0), L0=1.0, L1=1.0)
    assert cert.certified
    assert cert.refinements == 0


def test_flat_function_is_pushed_to_the_edge():
    samples = LocalSamples(np.zeros(25, dtype=complex), np.zeros(25))
    choice = local_transverse_value(samples, sigma=1e-3, delta=0.1)
    assert abs(choice.w) == pytest.approx(0.1)
    assert choice.achieved_sigma == pytest.approx(0.1)


def test_submersion_keeps_zero_perturbation():
    ticks = np.linspace(-1.0, 1.0, 21)
    z = (ticks[:, None] + 1j * ticks[None, :]).ravel()
    choice = local_transverse_value(LocalSamples(z, np.ones(len(z))), sigma=0.01, delta=0.1)
    assert choice.w == 0


def _globalized(action, jobs=1):
    chart = ModelChart(1, 20, action)
    poset = build_strata(chart)
    schedule, lattices = plan_perturbation(chart, poset, 20, chart_radius=0.3)
    initial = equivariant_average(peak_section(chart, np.zeros(1), 20))
    try:
        result = globalize(initial, lattices, schedule, poset, local_sample_spacing=0.25, jobs=jobs)
    except TransversalityNotAchieved as e:
        result = e.result
    return lattices, result


def test_globalize_respects_the_budget(trivial_line):
    lattices, result = _globalized(trivial_line)
    assert len(result.log) == sum(len(lat) for lat in lattices if lat is not None)
    assert all(abs(r.w) <= r.delta + 1e-12 for r in result.log)
    assert result.log[-1].budget_used <= result.log[-1].budget_total + 1e-12
    assert result.certificate.status in ("certified", "failed", "inconclusive")
    assert result.equivariance_defect == 0.0


def test_globalize_keeps_equivariance(z2_line):
    _, result = _globalized(z2_line)
    assert result.equivariance_defect < 1e-8
    points = np.array([[0.05 + 0.02j], [0.1 - 0.07j]])
    assert np.allclose(result.section.values(points), result.section.values(-points), atol=1e-8)


def test_globalize_is_deterministic_across_workers(trivial_line):
    _, serial = _globalized(trivial_line)
    _, threaded = _globalized(trivial_line, jobs=2)
    assert [r.w for r in serial.log] == [r.w for r in threaded.log]


def test_plan_sizes_every_stratum_by_its_lattice():
    domain = build_domain(ScenarioConfig(preset="T2_Z3", k=40))
    poset = build_strata(domain)
    schedule, lattices = plan_perturbation(domain, poset, 40)
    assert schedule_violations(schedule, poset) == []
    for index, lattice in enumerate(lattices):
        assert schedule.for_stratum(index).steps == max(1, lattice_family_count(lattice))


def test_globalize_refuses_more_families_than_steps(z2_line):
    chart = ModelChart(1, 20, z2_line)
    poset = build_strata(chart)
    lattices = build_domain_lattices(chart, poset, 1.0, 5.0, 20, chart_radius=1.0)
    crowded = max(range(len(lattices)), key=lambda i: lattice_family_count(lattices[i]))
    assert lattice_family_count(lattices[crowded]) > 1
    schedule = compute_schedule(poset, steps={crowded: 1})
    initial = equivariant_average(peak_section(chart, np.zeros(1), 20))
    with pytest.raises(ScheduleInfeasible) as info:
        globalize(initial, lattices, schedule, poset, local_sample_spacing=0.25)
    assert info.value.clause == "family_count"
