import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from app.errors import GroupSizeCapExceeded, NonUnitaryGenerator, NotASubgroup
from app.geometry.group_rep import (
    action_from_json,
    action_to_json,
    all_subgroups,
    build_group,
    complex_to_real,
    cyclic_cover,
    fixed_subspace,
    real_to_complex,
    singular_set,
    stabilizer,
)
from tests.conftest import cyclic


@pytest.mark.parametrize("order", [2, 3, 4, 6])
def test_cyclic_group_order(order):
    action = cyclic(order)
    assert action.order == order
    assert action.element_order(1) == order


def test_klein_group_has_five_subgroups(klein_plane):
    assert klein_plane.order == 4
    subgroups = all_subgroups(klein_plane)
    assert sorted(s.order for s in subgroups) == [1, 2, 2, 2, 4]


def test_cayley_table_is_a_group(klein_plane):
    table = klein_plane.cayley_table
    for row in table:
        assert sorted(row) == list(range(klein_plane.order))
    for i in range(klein_plane.order):
        assert klein_plane.multiply(i, klein_plane.inverse(i)) == klein_plane.identity_index


def test_non_unitary_generator_rejected():
    with pytest.raises(NonUnitaryGenerator):
        build_group([np.array([[2.0]])])


def test_irrational_rotation_hits_cap():
    with pytest.raises(GroupSizeCapExceeded):
        build_group([np.array([[np.exp(1j)]])], cap=50)


def test_fixed_subspaces_of_klein(klein_plane):
    first = klein_plane.index_of(np.diag([-1.0 + 0j, 1.0]))
    space = fixed_subspace(klein_plane, [klein_plane.identity_index, first])
    assert space.rank == 1
    assert np.allclose(np.abs(space.basis[0]), [0.0, 1.0])
    assert fixed_subspace(klein_plane, range(4)).rank == 0
    assert fixed_subspace(klein_plane, [klein_plane.identity_index]).rank == 2


def test_fixed_subspace_requires_subgroup(klein_plane):
    first = klein_plane.index_of(np.diag([-1.0 + 0j, 1.0]))
    with pytest.raises(NotASubgroup):
        fixed_subspace(klein_plane, [first])


def test_singular_set_of_klein_is_two_axes_and_origin(klein_plane):
    ranks = sorted(space.rank for space in singular_set(klein_plane))
    assert ranks == [0, 1, 1]


def test_cyclic_cover_of_klein(klein_plane):
    cover = cyclic_cover(klein_plane)
    assert len(cover) == 3
    assert all(len(c) == 2 for c in cover)


def test_stabilizer_on_axis(klein_plane):
    point = np.array([0.0, 1.0 + 1.0j])
    assert len(stabilizer(klein_plane, point)) == 2
    assert len(stabilizer(klein_plane, np.zeros(2, dtype=complex))) == 4


def test_action_json_round_trip(klein_plane):
    again = action_from_json(action_to_json(klein_plane))
    assert again.order == klein_plane.order
    for m in klein_plane.elements:
        assert again.index_of(m) is not None


@given(st.lists(st.complex_numbers(max_magnitude=10, allow_nan=False, allow_infinity=False), min_size=2, max_size=2))
@settings(deadline=None, max_examples=50)
def test_real_complex_identification(values):
    z = np.array([values], dtype=complex)
    assert np.allclose(real_to_complex(complex_to_real(z)), z)


@given(st.integers(min_value=2, max_value=12))
@settings(deadline=None, max_examples=11)
def test_every_element_order_divides_group_order(order):
    action = cyclic(order)
    assert all(order % action.element_order(i) == 0 for i in range(order))


CYCLIC_AND_KLEIN = {
    "z3": [np.array([[np.exp(2j * np.pi / 3)]])],
    "z4": [np.array([[1j]])],
    "z6": [np.array([[np.exp(1j * np.pi / 3)]])],
    "klein": [np.diag([-1.0 + 0j, 1.0]), np.diag([1.0 + 0j, -1.0])],
}


@pytest.mark.parametrize("name", sorted(CYCLIC_AND_KLEIN))
def test_cyclic_subgroup_has_element_order(name):
    action = build_group(CYCLIC_AND_KLEIN[name])
    for i in range(action.order):
        members = action.generated_subgroup([i])
        assert i in members
        assert len(members) == action.element_order(i)
        assert action.is_subgroup(members)


def test_involution_generates_two_elements(z2_line):
    assert z2_line.generated_subgroup([1]) == frozenset({0, 1})
