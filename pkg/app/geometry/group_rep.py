import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
from scipy.linalg import subspace_angles

from app.config import settings
from app.errors import GroupSizeCapExceeded, NonUnitaryGenerator, NotASubgroup

logger = logging.getLogger(__name__)

MATRIX_EQ_TOL = 1e-9
SINGULAR_CUTOFF = 1e-9


@dataclass(frozen=True, eq=False)
class FiniteUnitaryAction:
    """A finite subgroup H of U(n), stored as dense matrices plus its Cayley table."""

    dimension: int
    elements: np.ndarray
    identity_index: int
    cayley_table: np.ndarray
    unitarity_tol: float = 1e-12
    inverse_table: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        inverse = np.empty(self.order, dtype=int)
        for i in range(self.order):
            inverse[i] = int(np.nonzero(self.cayley_table[i] == self.identity_index)[0][0])
        object.__setattr__(self, "inverse_table", inverse)
        self.elements.setflags(write=False)
        self.cayley_table.setflags(write=False)

    @property
    def order(self) -> int:
        return len(self.elements)

    def matrix(self, index: int) -> np.ndarray:
        return self.elements[index]

    def multiply(self, i: int, j: int) -> int:
        return int(self.cayley_table[i, j])

    def inverse(self, i: int) -> int:
        return int(self.inverse_table[i])

    def element_order(self, i: int) -> int:
        power, count = i, 1
        while power != self.identity_index:
            power = self.multiply(i, power)
            count += 1
        return count

    def index_of(self, matrix: np.ndarray) -> Optional[int]:
        distances = np.max(np.abs(self.elements - matrix[None, :, :]), axis=(1, 2))
        hits = np.nonzero(distances < MATRIX_EQ_TOL)[0]
        return int(hits[0]) if len(hits) else None

    def generated_subgroup(self, indices: Iterable[int]) -> frozenset:
        members = {self.identity_index}
        frontier = list(set(indices))
        generators = list(frontier)
        members.update(frontier)
        while frontier:
            new = []
            for a in frontier:
                for g in generators:
                    product = self.multiply(g, a)
                    if product not in members:
                        members.add(product)
                        new.append(product)
            frontier = new
        return frozenset(members)

    def is_subgroup(self, indices: Iterable[int]) -> bool:
        members = set(indices)
        if self.identity_index not in members:
            return False
        return all(self.multiply(a, b) in members for a in members for b in members)

    def real_form(self, index: int) -> np.ndarray:
        return complex_to_real_matrix(self.elements[index])

    def act(self, index: int, points: np.ndarray) -> np.ndarray:
        """Apply rho(h) to an array of points of shape (..., n)."""
        return points @ self.elements[index].T

    def non_identity(self) -> list[int]:
        return [i for i in range(self.order) if i != self.identity_index]


@dataclass(frozen=True, eq=False)
class ComplexSubspace:
    ambient_dim: int
    basis: np.ndarray

    @property
    def rank(self) -> int:
        return int(self.basis.shape[0])

    def projector(self) -> np.ndarray:
        if self.rank == 0:
            return np.zeros((self.ambient_dim, self.ambient_dim), dtype=complex)
        return self.basis.T @ self.basis.conj()

    def distance(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        residual = points - points @ self.projector().T
        return np.linalg.norm(residual, axis=-1)

    def contains(self, points: np.ndarray, tol: float = 1e-8) -> np.ndarray:
        return self.distance(points) <= tol

    def is_subspace_of(self, other: "ComplexSubspace", tol: float = 1e-8) -> bool:
        if self.rank == 0:
            return True
        return bool(np.all(other.contains(self.basis, tol)))

    def same_as(self, other: "ComplexSubspace", tol: float = 1e-8) -> bool:
        if self.rank != other.rank:
            return False
        if self.rank == 0:
            return True
        angles = subspace_angles(self.basis.T, other.basis.T)
        return bool(np.max(np.abs(angles)) < tol)

    def transformed(self, matrix: np.ndarray) -> "ComplexSubspace":
        if self.rank == 0:
            return self
        return ComplexSubspace(self.ambient_dim, canonical_basis(self.basis @ matrix.T))

    def sort_key(self) -> tuple:
        flat = np.round(self.projector(), 9).ravel()
        return (self.rank, tuple(np.concatenate([flat.real, flat.imag]).tolist()))

    def to_json(self) -> dict:
        return {
            "ambient_dim": self.ambient_dim,
            "rank": self.rank,
            "basis": [[[float(c.real), float(c.imag)] for c in row] for row in self.basis],
        }


@dataclass(frozen=True)
class Subgroup:
    elements: frozenset
    class_label: int
    conjugates: tuple
    normalizer: frozenset

    @property
    def order(self) -> int:
        return len(self.elements)

    @property
    def is_normal(self) -> bool:
        return len(self.conjugates) == 1

    def sorted_elements(self) -> tuple:
        return tuple(sorted(self.elements))


def complex_to_real_matrix(matrix: np.ndarray) -> np.ndarray:
    """Real 2n x 2n form acting on (Re z, Im z)."""
    re, im = matrix.real, matrix.imag
    return np.block([[re, -im], [im, re]])


def complex_to_real(points: np.ndarray) -> np.ndarray:
    return np.concatenate([points.real, points.imag], axis=-1)


def real_to_complex(points: np.ndarray) -> np.ndarray:
    n = points.shape[-1] // 2
    return points[..., :n] + 1j * points[..., n:]


def canonical_basis(spanning: np.ndarray) -> np.ndarray:
    """Orthonormal basis depending only on the span: Gram-Schmidt of projected unit vectors."""
    spanning = np.atleast_2d(spanning)
    n = spanning.shape[1]
    u, sv, _ = np.linalg.svd(spanning.T, full_matrices=False)
    span = u[:, sv > SINGULAR_CUTOFF]
    if span.shape[1] == 0:
        return np.zeros((0, n), dtype=complex)
    projector = span @ span.conj().T
    basis = []
    for j in range(n):
        v = projector[:, j].copy()
        for b in basis:
            v = v - (b.conj() @ v) * b
        norm = np.linalg.norm(v)
        if norm > 1e-6:
            v = v / norm
            # fix the phase: first significant entry real positive
            lead = v[np.argmax(np.abs(v) > 1e-9)]
            v = v * (abs(lead) / lead)
            basis.append(v)
        if len(basis) == span.shape[1]:
            break
    return np.array(basis, dtype=complex).reshape(len(basis), n)


def _check_unitary(matrix: np.ndarray, tol: float) -> None:
    n = matrix.shape[0]
    if matrix.shape != (n, n):
        raise NonUnitaryGenerator(f"Generator must be square, got shape {matrix.shape}")
    defect = np.max(np.abs(matrix.conj().T @ matrix - np.eye(n)))
    if defect > tol:
        raise NonUnitaryGenerator(f"Generator is not unitary (defect {defect:.3e} > {tol:.1e})")


def build_group(
    generators: list,
    dimension: Optional[int] = None,
    cap: Optional[int] = None,
    unitarity_tol: float = 1e-12,
) -> FiniteUnitaryAction:
    cap = cap or settings.GROUP_SIZE_CAP
    mats = [np.asarray(g, dtype=complex) for g in generators]
    if dimension is None:
        if not mats:
            raise ValueError("dimension is required for an empty generating set")
        dimension = mats[0].shape[0]
    for m in mats:
        if m.shape != (dimension, dimension):
            raise NonUnitaryGenerator(f"Generator of shape {m.shape} in dimension {dimension}")
        _check_unitary(m, unitarity_tol)

    elements = [np.eye(dimension, dtype=complex)]
    frontier = [0]
    while frontier:
        new = []
        for idx in frontier:
            for g in mats:
                candidate = g @ elements[idx]
                stack = np.array(elements)
                if np.any(np.max(np.abs(stack - candidate), axis=(1, 2)) < MATRIX_EQ_TOL):
                    continue
                elements.append(candidate)
                new.append(len(elements) - 1)
                if len(elements) > cap:
                    raise GroupSizeCapExceeded(
                        f"Group closure exceeded {cap} elements; the generators do not "
                        f"generate a small finite group"
                    )
        frontier = new

    stack = np.array(elements)
    order = len(stack)
    table = np.empty((order, order), dtype=int)
    for i in range(order):
        products = stack[i][None, :, :] @ stack
        for j in range(order):
            distances = np.max(np.abs(stack - products[j]), axis=(1, 2))
            table[i, j] = int(np.argmin(distances))

    logger.info(f"Built finite unitary group of order {order} in U({dimension})")
    action = FiniteUnitaryAction(dimension, stack, 0, table, unitarity_tol)
    for i in range(order):
        if order % action.element_order(i) != 0:
            raise GroupSizeCapExceeded(f"Element {i} has order not dividing |H| = {order}")
    return action


def fixed_subspace(action: FiniteUnitaryAction, subgroup: Iterable[int]) -> ComplexSubspace:
    members = sorted(set(subgroup))
    if not action.is_subgroup(members):
        raise NotASubgroup(f"Indices {members} do not form a subgroup")
    n = action.dimension
    eye = np.eye(n)
    stacked = np.concatenate([action.matrix(h) - eye for h in members], axis=0)
    _, sv, vh = np.linalg.svd(stacked)
    sv_full = np.zeros(n)
    sv_full[: len(sv)] = sv
    null = vh[sv_full < SINGULAR_CUTOFF].conj()
    if null.shape[0] == 0:
        return ComplexSubspace(n, np.zeros((0, n), dtype=complex))
    return ComplexSubspace(n, canonical_basis(null))


def singular_set(action: FiniteUnitaryAction) -> list[ComplexSubspace]:
    found: list[ComplexSubspace] = []
    for h in action.non_identity():
        space = fixed_subspace(action, action.generated_subgroup([h]))
        if not any(space.same_as(other) for other in found):
            found.append(space)
    return found


def _conjugate(action: FiniteUnitaryAction, subgroup: frozenset, g: int) -> frozenset:
    g_inv = action.inverse(g)
    return frozenset(action.multiply(action.multiply(g, k), g_inv) for k in subgroup)


def all_subgroups(action: FiniteUnitaryAction, cap: Optional[int] = None) -> list[Subgroup]:
    cap = cap or settings.SUBGROUP_CAP
    if action.order > cap:
        raise GroupSizeCapExceeded(
            f"Subgroup enumeration is limited to |H| <= {cap}, got {action.order}"
        )
    cyclic = {action.generated_subgroup([h]) for h in range(action.order)}
    subgroups = set(cyclic)
    frontier = set(cyclic)
    while frontier:
        new = set()
        for a in frontier:
            for c in cyclic:
                if c <= a:
                    continue
                joined = action.generated_subgroup(a | c)
                if joined not in subgroups:
                    new.add(joined)
        subgroups |= new
        frontier = new

    ordered = sorted(subgroups, key=lambda s: (len(s), tuple(sorted(s))))
    labels: dict[frozenset, int] = {}
    result = []
    for sub in ordered:
        conjugates = sorted(
            {_conjugate(action, sub, g) for g in range(action.order)},
            key=lambda s: tuple(sorted(s)),
        )
        if sub not in labels:
            label = len(set(labels.values()))
            for c in conjugates:
                labels[c] = label
        normalizer = frozenset(
            g for g in range(action.order) if _conjugate(action, sub, g) == sub
        )
        result.append(Subgroup(sub, labels[sub], tuple(conjugates), normalizer))
    logger.debug(f"Enumerated {len(result)} subgroups of a group of order {action.order}")
    return result


def cyclic_cover(action: FiniteUnitaryAction) -> list[frozenset]:
    cyclic = sorted(
        {action.generated_subgroup([h]) for h in range(action.order)},
        key=lambda s: (len(s), tuple(sorted(s))),
    )
    maximal = [c for c in cyclic if not any(c < other for other in cyclic)]
    return maximal


def cyclic_generator(action: FiniteUnitaryAction, subgroup: frozenset) -> int:
    for h in sorted(subgroup):
        if action.generated_subgroup([h]) == subgroup:
            return h
    raise NotASubgroup(f"Subgroup {sorted(subgroup)} is not cyclic")


def stabilizer(action: FiniteUnitaryAction, point: np.ndarray, tol: float = 1e-8) -> frozenset:
    return frozenset(
        h for h in range(action.order) if np.linalg.norm(action.act(h, point) - point) <= tol
    )


def action_to_json(action: FiniteUnitaryAction) -> dict:
    return {
        "n": action.dimension,
        "elements": [
            [[float(c.real), float(c.imag)] for c in m.ravel()] for m in action.elements
        ],
    }


def action_from_json(data: dict) -> FiniteUnitaryAction:
    n = int(data["n"])
    mats = [
        np.array([complex(re, im) for re, im in flat], dtype=complex).reshape(n, n)
        for flat in data["elements"]
    ]
    return build_group(mats, dimension=n)

