import numpy as np
import pytest

from app.errors import NotCertified, ResolutionTooCoarse
from app.geometry.bundle_sections import ChartPolynomial, ModelChart, equivariant_average, peak_section
from app.geometry.divisor_analysis import (
    ZeroSetSample,
    connectivity,
    finite_difference_hessian,
    hessian_agreement,
    invariance_check,
    isolated_fixed_point_check,
    log_norm_derivatives,
    morse_analysis,
    verify_symplectic,
    zero_set,
)
from app.geometry.strata import build_strata
from app.geometry.transversality import TransversalityCertificate


@pytest.fixture
def bounded_chart():
    return ModelChart(1, 20, chart_radius=3.0)


def test_nowhere_vanishing_section_has_no_zeros(bounded_chart):
    zeros = zero_set(ChartPolynomial.constant(bounded_chart, 1.0))
    assert len(zeros) == 0
    assert verify_symplectic(zeros, ChartPolynomial.constant(bounded_chart, 1.0)).ok


def test_coordinate_has_one_symplectic_zero(bounded_chart):
    section = ChartPolynomial.coordinate(bounded_chart)
    zeros = zero_set(section)
    assert len(zeros) == 1
    assert abs(zeros.points[0, 0]) < 1e-10
    report = verify_symplectic(zeros, section)
    assert report.ok
    assert report.min_margin == pytest.approx(1.0)


def test_antiholomorphic_zero_fails_symplectic_check(bounded_chart):
    section = ChartPolynomial.coordinate(bounded_chart, conjugate=True)
    zeros = zero_set(section)
    report = verify_symplectic(zeros, section)
    assert len(zeros) == 1
    assert not report.ok
    assert report.failures == 1


def test_uncertified_sections_are_refused(bounded_chart):
    cert = TransversalityCertificate(0.1, 0.25, 0.0, 0.0, {"kind": "chart"}, "failed")
    with pytest.raises(NotCertified):
        zero_set(ChartPolynomial.coordinate(bounded_chart), certificate=cert)


def test_components_of_two_clusters():
    chart = ModelChart(1, 20)
    w = np.array([0.0, 0.3, 0.6, 5.0, 5.3])
    zeros = ZeroSetSample(w[:, None] / chart.scale, chart, chart.scale, resolution=0.25)
    assert zeros.component_count() == 2
    assert connectivity(zeros) == 2
    assert connectivity(zeros, radius=0.4) == 2
    with pytest.raises(ResolutionTooCoarse):
        connectivity(zeros, radius=0.25)


def test_orbits_and_invariance(z2_line):
    chart = ModelChart(1, 20, z2_line)
    symmetric = ZeroSetSample(np.array([[1.0], [-1.0]]) / chart.scale, chart, chart.scale, 0.25)
    assert symmetric.orbit_count() == 1
    assert invariance_check(symmetric) == pytest.approx(0.0, abs=1e-12)
    lopsided = ZeroSetSample(np.array([[1.0], [-1.0], [3.0]]) / chart.scale, chart, chart.scale, 0.25)
    assert lopsided.orbit_count() == 2
    assert invariance_check(lopsided) == pytest.approx(2.0)


def test_gaussian_log_norm_is_a_maximum(plain_chart):
    peak = peak_section(plain_chart, np.zeros(1), 20)
    f, grad, hess = log_norm_derivatives(peak, np.zeros((1, 1)))
    assert f[0] == pytest.approx(0.0)
    assert np.allclose(grad[0], 0.0)
    assert np.allclose(hess[0], -np.eye(2))


def test_morse_index_of_a_peak(plain_chart):
    peak = peak_section(plain_chart, np.zeros(1), 20)
    report = morse_analysis(peak)
    assert len(report.critical_points) == 1
    assert report.indices == [2]
    assert abs(report.critical_points[0].point[0]) * peak.scale < 1e-6
    assert report.index_bound_ok


def test_hessians_agree_with_finite_differences(plain_chart):
    peak = peak_section(plain_chart, np.array([0.02j]), 20)
    point = np.array([0.03 + 0.02j])
    assert hessian_agreement(peak, point) < 1e-5
    numeric = finite_difference_hessian(peak, point)
    assert np.allclose(numeric, numeric.T, atol=1e-6)


def test_isolated_fixed_point_flags(z2_line):
    chart = ModelChart(1, 20, z2_line, chart_radius=3.0)
    poset = build_strata(chart)
    vanishing = isolated_fixed_point_check(ChartPolynomial.coordinate(chart), poset)
    assert [row["vanishes"] for row in vanishing] == [True]
    constant = isolated_fixed_point_check(ChartPolynomial.constant(chart, 1.0), poset)
    assert [row["vanishes"] for row in constant] == [False]


@pytest.mark.slow
@pytest.mark.parametrize("k", [20, 40])
def test_torus_zero_count_matches_degree(t2_z2, k):
    section = equivariant_average(peak_section(t2_z2, np.array([0.21 + 0.37j]), k, "periodized"))
    zeros = zero_set(section, resolution=0.25)
    assert zeros.winding_count == k
    assert 0 < len(zeros) <= k
    assert invariance_check(zeros) < 0.05
