import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from app.config import ScenarioConfig
from app.errors import ActionDoesNotPreserveDomain, CenterOutsideDomain
from app.geometry.bundle_sections import (
    ChartPolynomial,
    ModelChart,
    SectionExpansion,
    asymptotic_profile,
    bump,
    cutoff_gradient_bound,
    equivariant_average,
    peak_bounds,
    peak_section,
    pullback_check,
    sample_ball,
)
from app.presets import build_domain
from tests.conftest import cyclic


def test_bump_is_one_then_zero():
    beta, dbeta, _ = bump(np.array([0.0, 0.25, 0.5, 1.0, 2.0]))
    assert np.allclose(beta, [1.0, 1.0, 1.0, 0.0, 0.0])
    assert np.allclose(dbeta, 0.0)
    inner, _, _ = bump(np.linspace(0.5, 1.0, 50))
    assert np.all(np.diff(inner) <= 1e-15)


def test_gaussian_peak_is_holomorphic(plain_chart):
    peak = peak_section(plain_chart, np.zeros(1), 20)
    pts = sample_ball(1, 4.0, 0.25, scale=peak.scale)
    field = peak.evaluate(pts)
    assert np.max(field.dbar_norm) < 1e-12
    assert np.max(peak.second_order(pts).nabla_dbar_norm) < 1e-10
    assert abs(peak.values(np.zeros((1, 1)))[0]) == pytest.approx(1.0)


def test_gaussian_peak_modulus(plain_chart):
    peak = peak_section(plain_chart, np.array([0.1 + 0.05j]), 20)
    pts = sample_ball(1, 3.0, 0.5, center=peak.center, scale=peak.scale)
    dist = np.abs(pts[:, 0] - peak.center[0]) * peak.scale
    assert np.allclose(np.abs(peak.values(pts)), np.exp(-(dist**2) / 4.0))


@pytest.mark.parametrize("k", [10, 100, 1000])
def test_value_envelope_bound(k, trivial_line):
    peak = peak_section(ModelChart(1, k, trivial_line), np.zeros(1), k)
    bounds = peak_bounds(peak, np.zeros(1), radius_gk=6.0, spacing=0.2)
    assert bounds["value_constant"] <= 1.0 + 1e-9


def test_average_at_generic_point_stays_large(z2_line):
    k = 100
    chart = ModelChart(1, k, z2_line)
    x = np.array([10.0 / math.sqrt(2.0 * math.pi * k)])
    average = equivariant_average(peak_section(chart, x, k))
    ball = sample_ball(1, 1.0, 0.1, center=x, scale=average.scale)
    assert np.min(np.abs(average.values(ball))) >= 0.5 * math.exp(-1.0) + 1e-6


def test_average_at_fixed_point_is_the_peak(z2_line):
    chart = ModelChart(1, 50, z2_line)
    average = equivariant_average(peak_section(chart, np.zeros(1), 50))
    assert len(average.terms) == 2
    assert abs(average.values(np.zeros((1, 1)))[0]) == pytest.approx(1.0)


@pytest.mark.parametrize("order", [2, 3, 4, 6])
def test_chart_average_is_invariant(order):
    action = cyclic(order)
    chart = ModelChart(1, 30, action)
    x = np.array([0.3 + 0.1j])
    average = equivariant_average(peak_section(chart, x, 30), weight=0.7 - 0.2j)
    pts = sample_ball(1, 5.0, 0.5, scale=average.scale)
    assert pullback_check(average, action, pts) < 1e-12


def test_torus_average_is_invariant(t2_z2):
    peak = peak_section(t2_z2, np.array([0.21 + 0.37j]), 40, "periodized")
    average = equivariant_average(peak)
    rng = np.random.default_rng(1)
    pts = t2_z2.from_lattice_coords(rng.random((32, 2)))
    assert pullback_check(average, t2_z2.group, pts) < 1e-8


SQUARE_TORUS = build_domain(ScenarioConfig(preset="T2_Z2", k=40))


@given(st.floats(min_value=0.0, max_value=1.0), st.floats(min_value=0.0, max_value=1.0))
@settings(deadline=None, max_examples=20)
def test_truncated_periodization_matches_a_wide_sum(x, y):
    center = np.array([0.21 + 0.37j])
    truncated = peak_section(SQUARE_TORUS, center, 40, "periodized")
    wide = peak_section(SQUARE_TORUS, center, 40, "periodized", tail_tol=1e-300)
    z = SQUARE_TORUS.from_lattice_coords(np.array([[x, y]]))
    near, far = truncated.evaluate(z), wide.evaluate(z)
    assert abs(near.value[0] - far.value[0]) < 1e-12
    assert np.max(np.abs(near.grad - far.grad)) < 1e-12
    assert np.max(np.abs(near.dbar - far.dbar)) < 1e-12


def test_periodized_norm_is_periodic(t2_z2):
    peak = peak_section(t2_z2, np.array([0.4 + 0.1j]), 40, "periodized")
    z = np.array([[0.13 + 0.71j], [0.9 + 0.05j]])
    base = np.abs(peak.values(z))
    for shift in (1.0, 1.0j, -1.0 + 1.0j):
        assert np.allclose(np.abs(peak.values(z + shift)), base, atol=1e-9)


def test_centers_must_fit_the_domain(plain_chart, t2_z2):
    with pytest.raises(CenterOutsideDomain):
        peak_section(t2_z2, np.zeros(1), 40, "gaussian")
    with pytest.raises(CenterOutsideDomain):
        peak_section(plain_chart, np.zeros(1), 20, "periodized")


def test_average_rejects_foreign_group(plain_chart, z2_plane):
    with pytest.raises(ActionDoesNotPreserveDomain):
        equivariant_average(peak_section(plain_chart, np.zeros(1), 20), z2_plane)


def test_coordinate_polynomials(plain_chart):
    z = ChartPolynomial.coordinate(plain_chart)
    zbar = ChartPolynomial.coordinate(plain_chart, conjugate=True)
    at = np.array([[0.2 - 0.1j]])
    assert z.evaluate(at).del_norm[0] == pytest.approx(1.0)
    assert z.evaluate(at).dbar_norm[0] == pytest.approx(0.0)
    assert zbar.evaluate(at).dbar_norm[0] == pytest.approx(1.0)
    assert zbar.evaluate(at).del_norm[0] == pytest.approx(0.0)


def test_expansion_serialization_keeps_values(t2_z2):
    peak = peak_section(t2_z2, np.array([0.25 + 0.5j]), 40, "periodized")
    section = equivariant_average(peak, weight=0.5j)
    again = SectionExpansion.from_json(section.to_json(), t2_z2)
    pts = t2_z2.from_lattice_coords(np.array([[0.1, 0.2], [0.7, 0.4]]))
    assert np.allclose(again.values(pts), section.values(pts))


def test_cutoff_profile_decays(trivial_line):
    def builder(k):
        return peak_section(ModelChart(1, k, trivial_line), np.zeros(1), k, "cutoff")

    profile = asymptotic_profile(builder, [25, 50, 100, 200], spacing=0.1)
    rows = profile["rows"]
    assert len(rows) == 4
    assert all(row["s"] == pytest.approx(1.0, abs=1e-6) for row in rows)
    dbar = [row["dbar"] for row in rows]
    assert all(b < a for a, b in zip(dbar, dbar[1:]))
    assert profile["exponents"]["dbar"] <= -0.5
    for row in rows:
        assert row["grad"] <= cutoff_gradient_bound(row["k"])
    grads = [row["grad"] for row in rows]
    assert all(b < a for a, b in zip(grads, grads[1:]))


def test_cutoff_gradient_bound_shrinks_with_k():
    bounds = [cutoff_gradient_bound(k) for k in (25, 50, 100, 200, 10**12)]
    assert all(b < a for a, b in zip(bounds, bounds[1:]))
    # the bump term underflows and only the Gaussian remains
    assert bounds[-1] == pytest.approx(math.exp(-0.5) / math.sqrt(2.0), rel=1e-3)


@given(st.floats(min_value=-2.0, max_value=2.0), st.floats(min_value=-2.0, max_value=2.0))
@settings(deadline=None, max_examples=25)
def test_peak_modulus_never_exceeds_one(x, y):
    chart = ModelChart(1, 10)
    peak = peak_section(chart, np.zeros(1), 10)
    assert abs(peak.values(np.array([[complex(x, y)]]))[0]) <= 1.0 + 1e-12
