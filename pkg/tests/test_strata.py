import numpy as np
import pytest

from app.config import ScenarioConfig
from app.errors import StrataError
from app.geometry.strata import (
    build_strata,
    chain_heights,
    check_poset_axioms,
    isotropy_density,
    local_strata,
    singular_descent,
    torus_strata,
)
from app.presets import build_domain


def test_kummer_surface_has_sixteen_points(t4_z2):
    poset = torus_strata(t4_z2)
    assert len(poset) == 17
    assert sorted(poset.heights()) == [0] + [1] * 16
    assert sum(s.is_point for s in poset.strata) == 16
    assert poset.strata[poset.max_index].is_top


@pytest.mark.parametrize(
    "preset, count",
    [("T2_Z2", 5), ("T2_Z3", 4), ("T2_Z4", 4), ("T2_Z6", 4)],
)
def test_elliptic_quotients(preset, count):
    poset = build_strata(build_domain(ScenarioConfig(preset=preset, k=10)))
    assert len(poset) == count
    assert sorted(set(poset.heights())) == [0, 1]


def test_klein_chart_strata(klein_plane):
    poset = local_strata(klein_plane)
    assert len(poset) == 4
    assert poset.heights() == [0, 1, 1, 2]
    assert [s.fixed_subspace.rank for s in poset.strata] == [2, 1, 1, 0]


def test_heights_match_brute_force_chains(klein_plane, t4_z2):
    for poset in (local_strata(klein_plane), torus_strata(t4_z2)):
        assert chain_heights(poset.le) == poset.heights()
        check_poset_axioms(poset.le)


def test_poset_axioms_reject_cycles():
    le = np.array([[True, True], [True, True]])
    with pytest.raises(StrataError):
        check_poset_axioms(le)


def test_poset_axioms_require_unique_top():
    with pytest.raises(StrataError):
        check_poset_axioms(np.eye(2, dtype=bool))


def test_singular_descent_on_klein_chart(klein_plane):
    poset = local_strata(klein_plane)
    origin = singular_descent(poset, np.zeros(2))
    axis = singular_descent(poset, np.array([0.0, 0.7 + 0.2j]))
    generic = singular_descent(poset, np.array([0.3, 0.7j]))
    assert poset.strata[origin].height == 2
    assert poset.strata[axis].height == 1
    assert poset.strata[generic].is_top


def test_isotropy_is_generic_on_axes(klein_plane):
    poset = local_strata(klein_plane)
    for index in poset.by_height(1):
        assert isotropy_density(poset, index) == pytest.approx(1.0)


def test_below_and_above_are_inverse(klein_plane):
    poset = local_strata(klein_plane)
    for i in range(len(poset)):
        for j in poset.below(i):
            assert i in poset.above(j)


def test_dot_export_lists_every_stratum(klein_plane):
    dot = local_strata(klein_plane).to_dot()
    assert dot.startswith("digraph strata {")
    assert all(f"s{i} [" in dot for i in range(4))
