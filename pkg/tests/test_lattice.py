import math
from dataclasses import replace

import numpy as np
import pytest

from app.config import ScenarioConfig
from app.errors import DegenerateRadius
from app.geometry.group_rep import singular_set
from app.geometry.lattice import (
    BallRegion,
    BoxRegion,
    build_domain_lattices,
    chart_lattice,
    chart_lemma_lattice,
    lattice_1d,
    lattice_product,
    lattice_union_refine,
    orbit_representatives,
    plain_lattice,
    separate_families,
    sector_constant,
    self_separation_constant,
    stratum_lattice,
    tightness_fraction,
    torus_grid_count,
    verify_property_p,
)
from app.geometry.bundle_sections import ModelChart
from app.geometry.strata import local_strata, torus_strata
from app.presets import PRESETS
from app.utils.scenario import scenario_domain
from tests.conftest import cyclic

FIVE_PI = 5.0 * math.pi


def test_sector_constant():
    assert sector_constant(1) == 1.0
    assert sector_constant(2) == pytest.approx(4.0)
    assert sector_constant(6) == pytest.approx(12.0)


def test_self_separation_of_reflection(z2_line, klein_plane):
    assert self_separation_constant(z2_line) == pytest.approx(0.5)
    assert self_separation_constant(klein_plane) == pytest.approx(0.5)


def test_unit_grid_weighted_sum():
    lattice = plain_lattice(BoxRegion(1, (-15.0, -15.0), (15.0, 15.0)), D=5.0)
    report = verify_property_p(lattice, r_max=2)
    assert report.ok
    # sum over Z^2 of exp(-|m|^2 / 5) equals 5 pi up to exponentially small terms
    assert report.weighted_sums[0] == pytest.approx(FIVE_PI, abs=0.01)
    assert 4.0 <= report.distribution_constant <= 5.0 + 1e-9


def test_separation_violations_are_counted():
    lattice = plain_lattice(BoxRegion(1, (-10.0, -10.0), (10.0, 10.0)), D=5.0)
    report = verify_property_p(lattice, D=6.0)
    assert not report.separation_ok
    assert report.violations > 0


def test_one_dimensional_lattice_has_property_p():
    lattice = lattice_1d(2, D=5.0, radius=40.0)
    report = verify_property_p(lattice)
    assert report.covering_ok
    assert report.separation_ok
    assert report.family_count == lattice.family_count


def test_one_dimensional_lattice_needs_room():
    with pytest.raises(DegenerateRadius):
        lattice_1d(3, D=5.0, radius=10.0)


@pytest.mark.parametrize("D", [5.0, 10.0])
@pytest.mark.parametrize("order", [2, 3, 4, 6])
def test_one_dimensional_lattice_for_every_order(order, D):
    lattice = lattice_1d(order, D=D, radius=sector_constant(order) * D + 12.0)
    report = verify_property_p(lattice)
    assert report.separation_ok, report.violations
    assert report.covering_ok, report.uncovered


def test_order_four_lattice_out_to_radius_sixty():
    lattice = lattice_1d(4, D=5.0, radius=60.0)
    report = verify_property_p(lattice)
    assert report.violations == 0
    assert report.covering_ok


def test_covering_is_checked_up_to_the_exclusion_circle():
    lattice = lattice_1d(2, D=5.0, radius=40.0)
    full = verify_property_p(lattice)
    assert full.grid_points == len(lattice.region.sample_grid(0.25))
    # strip the shell next to |z| = C D = 20
    outer = np.abs(lattice.points[:, 0]) > 21.5
    thinned = replace(lattice, points=lattice.points[outer], families=lattice.families[outer])
    report = verify_property_p(thinned)
    assert report.separation_ok
    assert not report.covering_ok


def test_torus_grid_count_for_square_torus(t2_z2):
    scale = math.sqrt(2.0 * math.pi * 40)
    N, M = torus_grid_count(t2_z2, scale, R=1.0, D=5.0)
    assert (N, M) == (12, 4)
    assert N % M == 0


def test_top_stratum_lattice_on_elliptic_curve(t2_z2):
    poset = torus_strata(t2_z2)
    top = poset.strata[poset.max_index]
    lower = [s for s in poset.strata if not s.is_top]
    lattice = stratum_lattice(t2_z2, top, 1.0, 5.0, 40, lower=lower)
    assert len(lattice) > 0
    report = verify_property_p(lattice)
    assert report.covering_ok
    assert report.separation_ok


def test_point_stratum_lattice_is_the_point(t2_z2):
    poset = torus_strata(t2_z2)
    point = next(s for s in poset.strata if s.is_point)
    lattice = stratum_lattice(t2_z2, point, 11.0, 5.0, 40)
    assert len(lattice) == 1
    assert np.allclose(lattice.z_points[0], point.points[0])


def test_reflection_chart_lattice(z2_line):
    lattice = chart_lattice(z2_line, R=1.0, D=5.0, k=200, chart_radius=1.0)
    report = verify_property_p(lattice)
    assert report.separation_ok
    assert report.covering_ok
    assert 0.0 <= tightness_fraction(lattice, trials=5) <= 1.0


def test_domain_lattices_for_klein_chart(klein_plane):
    chart = ModelChart(2, 20, klein_plane)
    poset = local_strata(klein_plane, chart)
    lattices = build_domain_lattices(chart, poset, 1.0, 5.0, 20, chart_radius=1.0)
    assert len(lattices) == len(poset)
    origin = poset.by_height(2)[0]
    assert lattices[origin] is not None
    assert len(lattices[origin]) == 1
    for index in poset.by_height(1):
        lattice = lattices[index]
        assert lattice is not None
        basis = poset.strata[index].fixed_subspace
        assert np.all(basis.contains(lattice.points, tol=1e-6))


def _emptied(lattice):
    return replace(lattice, points=lattice.points[:0], families=lattice.families[:0])


def test_product_of_plain_factors():
    factor = lattice_1d(1, 3, 4)
    assert factor.family_count == 9
    product = lattice_product(factor, factor, _emptied(factor), _emptied(factor))
    assert len(product) == len(factor) ** 2
    assert product.family_count == 81
    assert product.action.order == 1


def test_product_keeps_both_reflections():
    factor = lattice_1d(2, 2, 10)
    product = lattice_product(factor, factor, _emptied(factor), _emptied(factor))
    assert product.action.order == 4
    assert product.params.m == 2


def test_union_with_trivial_group_keeps_partition():
    first = lattice_1d(1, 3, 4)
    refined = lattice_union_refine(first, lattice_1d(1, 3, 6))
    assert len(refined) == len(first)
    assert np.array_equal(refined.families, first.families)
    assert refined.params.separation == pytest.approx(first.params.separation - 2.0)


def test_union_stays_away_from_second_singular_set():
    second = lattice_1d(2, 3, 20)
    refined = lattice_union_refine(lattice_1d(1, 3, 20), second)
    assert len(refined) > 0
    assert np.all(np.abs(refined.points[:, 0]) > second.params.exclusion_radius)
    assert refined.action.order == 2


def test_separate_families_splits_close_pairs(z2_line):
    points = np.array([[0j], [1 + 0j], [5 + 0j]])
    labels, keep = separate_families(points, np.zeros(3, dtype=int), cyclic(1), D=2.0)
    assert keep.all()
    assert labels[0] != labels[1]
    assert labels[0] == labels[2]
    labels, keep = separate_families(np.array([[0.5 + 0j], [3 + 0j]]), np.zeros(2, dtype=int), z2_line, D=2.0)
    assert keep.tolist() == [False, True]
    assert len(labels) == 1


def test_orbit_representatives(z2_line):
    points = np.array([[1 + 0j], [-1 + 0j], [2 + 0j]])
    assert orbit_representatives(points, z2_line).tolist() == [1, 2]


def test_product_under_the_diagonal_involution(z2_plane):
    factor = lattice_1d(2, D=2.0, radius=10.0)
    disc = plain_lattice(BallRegion(1, 8.0), D=2.0)
    product = lattice_product(factor, factor, disc, disc, action=z2_plane)
    assert len(product) == len(factor) ** 2 + 2 * len(disc) * len(factor)
    report = verify_property_p(product)
    assert report.separation_ok, report.violations


def test_klein_union_chain_is_separated_away_from_the_axes(klein_plane):
    # spacing above 1 makes every union neighbour the point itself
    D, radius = 5.0, 26.0
    merged = chart_lemma_lattice(klein_plane, 2.5, D, radius)
    assert merged.params.separation == pytest.approx(D - 4.0)
    assert merged.action.order == 4
    # one unit past C D, clear of the boundary discs of every factor
    region = BallRegion(2, radius, sector_constant(2) * D + 1.0, tuple(singular_set(klein_plane)))
    inside = region.contains(merged.points)
    assert inside.sum() > 0
    restricted = replace(merged, points=merged.points[inside], families=merged.families[inside], region=region)
    report = verify_property_p(restricted, D=D)
    assert report.separation_ok, report.violations


def test_chart_lattice_records_its_repair(z2_line):
    lattice = chart_lattice(z2_line, R=1.0, D=5.0, k=20, chart_radius=1.0)
    repair = lattice.to_json()["repair"]
    assert set(repair) >= {"outside_region", "filled", "lemma_families", "split_families", "dropped", "gap_points"}
    assert all(value >= 0 for value in repair.values())
    assert repair["lemma_families"] + repair["split_families"] >= 1


PRESET_LEVELS = {
    "T2_Z2": 100,
    "T2_Z3": 100,
    "T2_Z4": 100,
    "T2_Z6": 100,
    "T4_Z2": 10,
    "C2_Z2xZ2_chart": 20,
    "C1_Zm_chart": 100,
}


@pytest.mark.parametrize("D", [5.0, 10.0])
@pytest.mark.parametrize("preset", sorted(PRESETS))
def test_every_preset_lattice_has_property_p(preset, D):
    config = ScenarioConfig(preset=preset, k=PRESET_LEVELS[preset])
    domain, poset = scenario_domain(config)
    lattices = build_domain_lattices(domain, poset, 1.0, D, config.k, config.chart_radius)
    if D == 5.0:
        assert lattices[poset.max_index] is not None
    for index, lattice in enumerate(lattices):
        if lattice is None:
            continue
        report = verify_property_p(lattice)
        assert report.separation_ok, (index, report.violations)
        assert report.covering_ok, (index, report.uncovered)
