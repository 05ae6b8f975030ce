"""Isotropy strata of H x C^n charts and of global quotients T^{2n}/G."""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from app.errors import LatticeNotPreserved, PointNotInAnyStratum, StrataError
from app.geometry.bundle_sections import ModelChart, TorusQuotient
from app.geometry.group_rep import (
    ComplexSubspace,
    FiniteUnitaryAction,
    Subgroup,
    all_subgroups,
    fixed_subspace,
    stabilizer,
)

logger = logging.getLogger(__name__)

MEMBERSHIP_TOL = 1e-6
GRID_RESOLUTION = {1: 64, 2: 16}


@dataclass(frozen=True, eq=False)
class FixedComponent:
    """One connected component of Fix(K) in a torus, in lattice coordinates.

    Finite components hold a single point; positive-dimensional ones hold
    grid samples found by the labeling fallback.
    """

    subgroup: frozenset
    samples: np.ndarray
    dimension: int

    @property
    def anchor(self) -> np.ndarray:
        return self.samples[0]

    def lattice_distance(self, x: np.ndarray) -> np.ndarray:
        tree = cKDTree(np.mod(self.samples, 1.0), boxsize=1.0 + 1e-12)
        dist, _ = tree.query(np.mod(np.atleast_2d(x), 1.0))
        return dist


@dataclass(eq=False)
class Stratum:
    subgroup: Subgroup
    fixed_subspace: ComplexSubspace
    effective: bool = True
    height: int = 0
    component_id: int = 0
    orbit: list = field(default_factory=list)
    domain: Optional[Union[ModelChart, TorusQuotient]] = field(default=None, repr=False)

    @property
    def subgroup_class(self) -> tuple:
        return self.subgroup.sorted_elements()

    @property
    def normalizer(self) -> frozenset:
        return self.subgroup.normalizer

    @property
    def is_top(self) -> bool:
        return self.subgroup.order == 1

    @property
    def is_point(self) -> bool:
        return self.fixed_subspace.rank == 0

    @property
    def points(self) -> np.ndarray:
        """Complex coordinates of the stratum when it is a finite set (orbit representatives included)."""
        if not self.is_point:
            raise StrataError("stratum is not zero-dimensional")
        if isinstance(self.domain, TorusQuotient):
            return self.domain.from_lattice_coords(np.array([c.anchor for c in self.orbit]))
        return np.zeros((1, self.fixed_subspace.ambient_dim), dtype=complex)

    def distance(self, z: np.ndarray) -> np.ndarray:
        """Euclidean (chart) or flat torus distance from z to the closure of the stratum."""
        z = np.atleast_2d(z)
        if self.is_top:
            return np.zeros(len(z))
        if isinstance(self.domain, TorusQuotient):
            if self.is_point:
                pts = self.points
                return np.min(
                    [self.domain.distance(z, np.broadcast_to(p, z.shape)) for p in pts], axis=0
                )
            x = self.domain.lattice_coords(z)
            lattice_scale = float(np.linalg.norm(self.domain.period_basis, 2))
            return lattice_scale * np.min([c.lattice_distance(x) for c in self.orbit], axis=0)
        return np.min([space.distance(z) for space in self.orbit], axis=0)

    def contains(self, z: np.ndarray, tol: float = MEMBERSHIP_TOL) -> np.ndarray:
        return self.distance(z) <= tol

    def to_json(self) -> dict:
        data = {
            "subgroup": list(self.subgroup_class),
            "subgroup_order": self.subgroup.order,
            "class_label": self.subgroup.class_label,
            "normalizer": sorted(self.normalizer),
            "effective": self.effective,
            "height": self.height,
            "component_id": self.component_id,
            "fixed_subspace": self.fixed_subspace.to_json(),
        }
        if isinstance(self.domain, TorusQuotient) and not self.is_top:
            data["anchors"] = [[float(v) for v in c.anchor] for c in self.orbit]
        return data


@dataclass(eq=False)
class StrataPoset:
    strata: list
    le: np.ndarray
    max_index: int
    domain: Optional[Union[ModelChart, TorusQuotient]] = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.strata)

    def below(self, index: int) -> list[int]:
        return [j for j in range(len(self)) if j != index and self.le[j, index]]

    def above(self, index: int) -> list[int]:
        return [j for j in range(len(self)) if j != index and self.le[index, j]]

    def heights(self) -> list[int]:
        return [s.height for s in self.strata]

    def max_height(self) -> int:
        return max(self.heights())

    def by_height(self, height: int) -> list[int]:
        return [i for i, s in enumerate(self.strata) if s.height == height]

    def to_json(self) -> dict:
        return {
            "max_index": self.max_index,
            "strata": [s.to_json() for s in self.strata],
            "le": self.le.astype(int).tolist(),
        }

    def to_dot(self) -> str:
        lines = ["digraph strata {", "  rankdir=BT;"]
        for i, s in enumerate(self.strata):
            label = f"tau{i}\\n|K|={s.subgroup.order} h={s.height} dim={s.fixed_subspace.rank}"
            lines.append(f'  s{i} [label="{label}"];')
        for i, j in _covers(self.le):
            lines.append(f"  s{i} -> s{j};")
        lines.append("}")
        return "\n".join(lines) + "\n"


def _covers(le: np.ndarray) -> list[tuple[int, int]]:
    size = len(le)
    strict = le & ~np.eye(size, dtype=bool)
    pairs = []
    for i, j in itertools.product(range(size), repeat=2):
        if strict[i, j] and not any(strict[i, m] and strict[m, j] for m in range(size)):
            pairs.append((i, j))
    return pairs


def check_poset_axioms(le: np.ndarray) -> None:
    size = len(le)
    if not np.all(np.diag(le)):
        raise StrataError("order relation is not reflexive")
    if np.any(le & le.T & ~np.eye(size, dtype=bool)):
        raise StrataError("order relation is not antisymmetric")
    closure = le.astype(int) @ le.astype(int) > 0
    if np.any(closure & ~le):
        raise StrataError("order relation is not transitive")
    tops = [j for j in range(size) if np.all(le[:, j])]
    if len(tops) != 1:
        raise StrataError(f"expected a unique maximal stratum, found {len(tops)}")


def _assign_heights(le: np.ndarray, top: int) -> list[int]:
    """h(tau) = length of the longest strictly increasing chain from tau up to the top."""
    size = len(le)
    strict = le & ~np.eye(size, dtype=bool)
    heights = [None] * size

    def height(i: int) -> int:
        if heights[i] is None:
            ups = [j for j in range(size) if strict[i, j]]
            heights[i] = 0 if not ups else 1 + max(height(j) for j in ups)
        return heights[i]

    result = [height(i) for i in range(size)]
    if result[top] != 0:
        raise StrataError("top stratum must have height 0")
    return result


def chain_heights(le: np.ndarray) -> list[int]:
    """Brute-force longest chains by enumerating all strictly increasing paths."""
    size = len(le)
    strict = le & ~np.eye(size, dtype=bool)
    best = [0] * size

    def walk(start: int, current: int, length: int):
        best[start] = max(best[start], length)
        for nxt in range(size):
            if strict[current, nxt]:
                walk(start, nxt, length + 1)

    for i in range(size):
        walk(i, i, 0)
    return best


def _finalize(strata: list, le: np.ndarray, domain) -> StrataPoset:
    check_poset_axioms(le)
    top = int(next(j for j in range(len(le)) if np.all(le[:, j])))
    for s, h in zip(strata, _assign_heights(le, top)):
        s.height = h

    def key(i):
        s = strata[i]
        anchor = ()
        if s.orbit and isinstance(s.orbit[0], FixedComponent):
            anchor = tuple(np.round(s.orbit[0].anchor, 9).tolist())
        return (s.height, s.subgroup.order, s.fixed_subspace.sort_key(), anchor)

    order = sorted(range(len(strata)), key=key)
    strata = [strata[i] for i in order]
    le = le[np.ix_(order, order)]
    top = order.index(top)
    for cid, s in enumerate(strata):
        s.component_id = cid
    logger.info(
        f"Stratification: {len(strata)} strata, max height {max(s.height for s in strata)}"
    )
    return StrataPoset(strata, le, top, domain)


def maximal_fixing_subgroup(action: FiniteUnitaryAction, space: ComplexSubspace) -> frozenset:
    """G_V = elements fixing V pointwise."""
    if space.rank == 0:
        return frozenset(range(action.order))
    return frozenset(
        h
        for h in range(action.order)
        if np.max(np.abs(space.basis @ action.matrix(h).T - space.basis)) <= 1e-9
    )


def local_strata(action: FiniteUnitaryAction, chart: Optional[ModelChart] = None) -> StrataPoset:
    """Strata of H x C^n: one per conjugacy class K with K = G_{Fix(K)}."""
    chart = chart or ModelChart(action.dimension, 1, action)
    chosen: dict[int, Subgroup] = {}
    for sub in all_subgroups(action):
        if sub.class_label in chosen:
            continue
        space = fixed_subspace(action, sub.elements)
        if maximal_fixing_subgroup(action, space) == sub.elements:
            chosen[sub.class_label] = sub

    strata = []
    for sub in chosen.values():
        space = fixed_subspace(action, sub.elements)
        orbit = []
        for h in range(action.order):
            image = space.transformed(action.matrix(h))
            if not any(image.same_as(o) for o in orbit):
                orbit.append(image)
        strata.append(Stratum(sub, space, True, 0, 0, orbit, chart))

    size = len(strata)
    le = np.zeros((size, size), dtype=bool)
    for i, j in itertools.product(range(size), repeat=2):
        le[i, j] = any(strata[i].fixed_subspace.is_subspace_of(o) for o in strata[j].orbit)
    return _finalize(strata, le, chart)


def _fixed_points(quotient: TorusQuotient, subgroup: frozenset) -> Optional[np.ndarray]:
    """Finite Fix(K) in lattice coordinates, or None when Fix(K) is positive-dimensional."""
    dim = 2 * quotient.n
    eye = np.eye(dim)
    rows = np.concatenate([quotient.lattice_actions[h] - eye for h in sorted(subgroup)], axis=0)
    if np.linalg.matrix_rank(rows, tol=1e-9) < dim:
        return None
    rows = np.round(rows).astype(int)
    # pick a full-rank square block; its solutions contain Fix(K)
    chosen: list[int] = []
    for r in range(len(rows)):
        if np.linalg.matrix_rank(rows[chosen + [r]].astype(float)) == len(chosen) + 1:
            chosen.append(r)
        if len(chosen) == dim:
            break
    block = rows[chosen].astype(float)
    inv = np.linalg.inv(block)
    bound = np.sum(np.abs(block), axis=1).astype(int)
    ranges = [range(-b - 1, b + 2) for b in bound]
    found: list[np.ndarray] = []
    for m in itertools.product(*ranges):
        x = inv @ np.array(m, dtype=float)
        x = np.mod(x + 1e-12, 1.0) - 1e-12
        x[np.abs(x) < 1e-12] = 0.0
        image = rows.astype(float) @ x
        if np.max(np.abs(image - np.round(image))) > 1e-9:
            continue
        if not any(np.max(np.abs(x - y)) < 1e-9 for y in found):
            found.append(x)
    found.sort(key=lambda v: tuple(np.round(v, 9)))
    return np.array(found)


def _fixed_components_by_grid(quotient: TorusQuotient, subgroup: frozenset) -> list[FixedComponent]:
    """Periodic grid marking plus connected-component labeling."""
    dim = 2 * quotient.n
    res = GRID_RESOLUTION.get(quotient.n, 16)
    ticks = np.arange(res) / res
    mesh = np.array(list(itertools.product(ticks, repeat=dim)))
    eye = np.eye(dim)
    tol = 1.5 / res
    mask = np.ones(len(mesh), dtype=bool)
    for h in subgroup:
        diff = mesh @ (quotient.lattice_actions[h] - eye).T
        mask &= np.max(np.abs(diff - np.round(diff)), axis=1) <= tol
    grid = mask.reshape((res,) * dim)
    labels, count = ndimage.label(grid, structure=np.ones((3,) * dim))
    # merge labels across the periodic boundary
    parent = list(range(count + 1))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for axis in range(dim):
        first = np.take(labels, 0, axis=axis)
        last = np.take(labels, res - 1, axis=axis)
        for a, b in zip(first.ravel(), last.ravel()):
            if a and b:
                parent[find(a)] = find(b)
    flat = labels.reshape(-1)
    rank = np.linalg.matrix_rank(
        np.concatenate([quotient.lattice_actions[h] - eye for h in subgroup], axis=0), tol=1e-9
    )
    components = []
    roots = sorted({find(l) for l in flat if l})
    for root in roots:
        members = np.array([i for i, l in enumerate(flat) if l and find(l) == root])
        components.append(FixedComponent(subgroup, mesh[members], (dim - rank) // 2))
    return components


def fixed_components(quotient: TorusQuotient, subgroup: frozenset) -> list[FixedComponent]:
    points = _fixed_points(quotient, subgroup)
    if points is None:
        return _fixed_components_by_grid(quotient, subgroup)
    return [FixedComponent(subgroup, p[None, :], 0) for p in points]


def torus_stabilizer(quotient: TorusQuotient, x: np.ndarray, tol: float = 1e-8) -> frozenset:
    """Elements g with rho(g) x = x mod Lambda, x in lattice coordinates."""
    stab = []
    for h, mat in enumerate(quotient.lattice_actions):
        diff = mat @ x - x
        if np.max(np.abs(diff - np.round(diff))) <= tol:
            stab.append(h)
    return frozenset(stab)


def _component_isotropy(quotient: TorusQuotient, component: FixedComponent) -> frozenset:
    if component.dimension == 0:
        return torus_stabilizer(quotient, component.anchor)
    result = None
    for x in component.samples[: min(len(component.samples), 32)]:
        stab = torus_stabilizer(quotient, x, tol=2.0 / GRID_RESOLUTION.get(quotient.n, 16))
        result = stab if result is None else result & stab
    return result


def _component_image(quotient: TorusQuotient, component: FixedComponent, h: int) -> np.ndarray:
    return np.mod(component.samples @ quotient.lattice_actions[h].T, 1.0)


def _same_component(a: FixedComponent, b: FixedComponent, image: np.ndarray) -> bool:
    if a.dimension != b.dimension:
        return False
    return bool(np.max(b.lattice_distance(image[:4])) < 1e-6 + (0.0 if a.dimension == 0 else 2.0 / 16))


def torus_strata(quotient: TorusQuotient) -> StrataPoset:
    """Strata of T^{2n}/G: orbits of fixed-locus components whose generic isotropy is K."""
    if not quotient.preserves_lattice():
        raise LatticeNotPreserved(
            f"The group of {quotient.name or 'the quotient'} does not map the period lattice to itself"
        )
    action = quotient.group
    subgroups = all_subgroups(action)
    lookup = {s.elements: s for s in subgroups}
    trivial = lookup[frozenset({action.identity_index})]
    strata = [Stratum(trivial, fixed_subspace(action, trivial.elements), True, 0, 0, [], quotient)]

    for sub in subgroups:
        if sub.order == 1:
            continue
        for comp in fixed_components(quotient, sub.elements):
            if _component_isotropy(quotient, comp) != sub.elements:
                continue
            known = False
            for existing in strata[1:]:
                if any(
                    _same_component(comp, other, _component_image(quotient, comp, h))
                    for other in existing.orbit
                    for h in range(action.order)
                ):
                    known = True
                    break
            if known:
                continue
            orbit = [comp]
            for h in range(action.order):
                image = _component_image(quotient, comp, h)
                if not any(_same_component(comp, o, image) for o in orbit):
                    conj = frozenset(
                        action.multiply(action.multiply(h, g), action.inverse(h)) for g in comp.subgroup
                    )
                    orbit.append(FixedComponent(conj, image, comp.dimension))
            strata.append(Stratum(sub, fixed_subspace(action, sub.elements), True, 0, 0, orbit, quotient))

    size = len(strata)
    le = np.zeros((size, size), dtype=bool)
    for i, j in itertools.product(range(size), repeat=2):
        if i == j or strata[j].is_top:
            le[i, j] = True
        elif strata[i].is_top:
            le[i, j] = False
        else:
            anchors = quotient.from_lattice_coords(np.array([strata[i].orbit[0].anchor]))
            tol = MEMBERSHIP_TOL if strata[j].is_point else 2.0 / GRID_RESOLUTION.get(quotient.n, 16)
            le[i, j] = bool(
                strata[j].distance(anchors)[0] <= tol
                and strata[i].fixed_subspace.rank < strata[j].fixed_subspace.rank
            )
    return _finalize(strata, le, quotient)


def build_strata(domain: Union[ModelChart, TorusQuotient]) -> StrataPoset:
    if isinstance(domain, TorusQuotient):
        return torus_strata(domain)
    return local_strata(domain.group, domain)


def singular_descent(poset: StrataPoset, point: np.ndarray, tol: float = MEMBERSHIP_TOL) -> int:
    """Index of the minimal stratum whose closure contains the point."""
    point = np.atleast_2d(np.asarray(point, dtype=complex))
    candidates = [i for i, s in enumerate(poset.strata) if s.contains(point, tol)[0]]
    if not candidates:
        raise PointNotInAnyStratum(f"Point {point[0]} is farther than {tol} from every fixed locus")
    minimal = [i for i in candidates if all(poset.le[i, j] for j in candidates)]
    if minimal:
        return minimal[0]
    best = max(candidates, key=lambda i: poset.strata[i].height)
    logger.warning(f"Point {point[0]} lies on incomparable strata {candidates}; using {best}")
    return best


def isotropy_density(
    poset: StrataPoset,
    index: int,
    samples: int = 200,
    seed: int = 0,
) -> float:
    """Fraction of random points of the stratum's fixed locus whose isotropy is exactly K."""
    stratum = poset.strata[index]
    domain = poset.domain
    if stratum.is_point:
        return 1.0
    rng = np.random.default_rng(seed)
    space = stratum.fixed_subspace
    n = space.ambient_dim
    coeffs = rng.normal(size=(samples, space.rank)) + 1j * rng.normal(size=(samples, space.rank))
    pts = coeffs @ space.basis
    if isinstance(domain, TorusQuotient):
        anchor = domain.from_lattice_coords(stratum.orbit[0].anchor[None, :])[0] if stratum.orbit else np.zeros(n)
        pts = anchor + 0.5 * pts
        hits = sum(
            torus_stabilizer(domain, domain.lattice_coords(p[None, :])[0], tol=1e-9) == stratum.subgroup.elements
            for p in pts
        )
    else:
        action = domain.group
        hits = sum(stabilizer(action, p, tol=1e-9) == stratum.subgroup.elements for p in pts)
    return hits / samples
