"""Equivariant separated lattices with a partition into strongly D-separated families.

All point coordinates are in g_k units (w = sqrt(2 pi k) z) unless stated.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from app.errors import DegenerateRadius, DimensionMismatch, EmptyStratumRegion, IncompatibleRegions
from app.geometry.bundle_sections import NU, TorusQuotient
from app.geometry.group_rep import (
    ComplexSubspace,
    FiniteUnitaryAction,
    build_group,
    complex_to_real,
    cyclic_cover,
    cyclic_generator,
    real_to_complex,
    singular_set,
)
from app.geometry.strata import Stratum

logger = logging.getLogger(__name__)

MAX_GRID_POINTS = 200_000
DISTANCE_TOL = 1e-9


def sector_constant(order: int) -> float:
    """C = max{1/|e^{pi i/k} - 1|, 1/|e^{2 pi i/k} - 1|, 2k}; 1 for the trivial group."""
    if order <= 1:
        return 1.0
    return max(
        1.0 / abs(np.exp(1j * math.pi / order) - 1.0),
        1.0 / abs(np.exp(2j * math.pi / order) - 1.0),
        2.0 * order,
    )


def self_separation_constant(action: FiniteUnitaryAction) -> float:
    """Smallest C with d(x, hx) >= D whenever dist(x, Fix(h)) > C D, over all h != 1."""
    worst = 0.0
    for h in action.non_identity():
        eig = np.linalg.eigvals(action.matrix(h))
        moving = np.abs(eig - 1.0)
        moving = moving[moving > 1e-9]
        if len(moving):
            worst = max(worst, 1.0 / float(np.min(moving)))
    return worst


@dataclass(frozen=True)
class LatticeConstants:
    C: float
    D: float
    m: int
    R: float
    exclusion_radius: float
    separation: float

    def to_json(self) -> dict:
        return {
            "C": self.C,
            "D": self.D,
            "m": self.m,
            "R": self.R,
            "exclusion_radius": self.exclusion_radius,
            "separation": self.separation,
        }


class Region:
    """Covered region; `contains(w, margin)` tests membership of the margin-interior."""

    n: int

    def contains(self, w: np.ndarray, margin: float = 0.0) -> np.ndarray:
        raise NotImplementedError

    def sample_grid(self, step: float, limit: Optional[int] = None, rng=None) -> np.ndarray:
        raise NotImplementedError

    def to_json(self) -> dict:
        raise NotImplementedError


def _box_grid(
    n: int,
    lo: np.ndarray,
    hi: np.ndarray,
    step: float,
    limit: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Points of step * Z^{2n} inside [lo, hi]; a random subset of `limit` points when larger."""
    starts = np.ceil(np.asarray(lo) / step - 1e-9).astype(int)
    stops = np.floor(np.asarray(hi) / step + 1e-9).astype(int)
    sizes = np.maximum(stops - starts + 1, 0)
    if np.any(sizes == 0):
        return np.zeros((0, n), dtype=complex)
    total = int(np.prod(sizes.astype(float)))
    if limit is not None and total > limit:
        rng = rng or np.random.default_rng(0)
        idx = rng.integers(0, sizes, size=(limit, 2 * n)) + starts
        return real_to_complex(idx * step)
    axes = [np.arange(a, b + 1) * step for a, b in zip(starts, stops)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 2 * n)
    return real_to_complex(mesh)


@dataclass(frozen=True)
class BallRegion(Region):
    """{|w| <= radius, dist(w, Sing) > exclusion}; Sing is a union of linear subspaces."""

    n: int
    radius: float
    exclusion: float = 0.0
    singular: tuple = ()

    def singular_distance(self, w: np.ndarray) -> np.ndarray:
        if not self.singular:
            return np.full(len(w), np.inf)
        return np.min([space.distance(w) for space in self.singular], axis=0)

    def contains(self, w: np.ndarray, margin: float = 0.0) -> np.ndarray:
        w = np.atleast_2d(w)
        inside = np.linalg.norm(w, axis=-1) <= self.radius - margin + DISTANCE_TOL
        if self.singular:
            inside &= self.singular_distance(w) > self.exclusion + margin
        return inside

    def sample_grid(self, step: float, limit: Optional[int] = None, rng=None) -> np.ndarray:
        r = self.radius
        pts = _box_grid(self.n, np.full(2 * self.n, -r), np.full(2 * self.n, r), step, limit, rng)
        return pts[self.contains(pts)]

    def to_json(self) -> dict:
        return {
            "kind": "ball",
            "n": self.n,
            "radius": self.radius,
            "exclusion": self.exclusion,
            "singular": [s.to_json() for s in self.singular],
        }


@dataclass(frozen=True)
class BoxRegion(Region):
    n: int
    lo: tuple
    hi: tuple

    def contains(self, w: np.ndarray, margin: float = 0.0) -> np.ndarray:
        x = complex_to_real(np.atleast_2d(w))
        lo, hi = np.array(self.lo), np.array(self.hi)
        return np.all((x >= lo + margin - DISTANCE_TOL) & (x <= hi - margin + DISTANCE_TOL), axis=-1)

    def sample_grid(self, step: float, limit: Optional[int] = None, rng=None) -> np.ndarray:
        return _box_grid(self.n, np.array(self.lo), np.array(self.hi), step, limit, rng)

    def to_json(self) -> dict:
        return {"kind": "box", "n": self.n, "lo": list(self.lo), "hi": list(self.hi)}


@dataclass(frozen=True)
class ProductRegion(Region):
    """(A1 x A2) u (B1 x A2) u (A1 x B2) for one-dimensional factor regions."""

    main1: Region
    main2: Region
    boundary1: Region
    boundary2: Region

    @property
    def n(self) -> int:
        return 2

    def contains(self, w: np.ndarray, margin: float = 0.0) -> np.ndarray:
        w = np.atleast_2d(w)
        a1 = self.main1.contains(w[:, :1], margin)
        a2 = self.main2.contains(w[:, 1:], margin)
        b1 = self.boundary1.contains(w[:, :1], margin)
        b2 = self.boundary2.contains(w[:, 1:], margin)
        return (a1 & a2) | (b1 & a2) | (a1 & b2)

    def sample_grid(self, step: float, limit: Optional[int] = None, rng=None) -> np.ndarray:
        r = max(getattr(f, "radius", 0.0) for f in (self.main1, self.main2, self.boundary1, self.boundary2))
        pts = _box_grid(2, np.full(4, -r), np.full(4, r), step, limit, rng)
        return pts[self.contains(pts)]

    def to_json(self) -> dict:
        return {
            "kind": "product",
            "factors": [r.to_json() for r in (self.main1, self.main2, self.boundary1, self.boundary2)],
        }


@dataclass(frozen=True)
class IntersectionRegion(Region):
    parts: tuple

    @property
    def n(self) -> int:
        return self.parts[0].n

    def contains(self, w: np.ndarray, margin: float = 0.0) -> np.ndarray:
        result = np.ones(len(np.atleast_2d(w)), dtype=bool)
        for part in self.parts:
            result &= part.contains(w, margin)
        return result

    def sample_grid(self, step: float, limit: Optional[int] = None, rng=None) -> np.ndarray:
        pts = self.parts[0].sample_grid(step, limit, rng)
        return pts[self.contains(pts)]

    def to_json(self) -> dict:
        return {"kind": "intersection", "parts": [p.to_json() for p in self.parts]}


@dataclass(frozen=True, eq=False)
class TorusRegion(Region):
    """T^{2n} in g_k units minus the exclusion-neighbourhoods of lower strata."""

    quotient: TorusQuotient
    scale: float
    lower: tuple = ()
    exclusion: float = 0.0

    @property
    def n(self) -> int:
        return self.quotient.n

    def stratum_distance(self, w: np.ndarray) -> np.ndarray:
        if not self.lower:
            return np.full(len(w), np.inf)
        z = np.atleast_2d(w) / self.scale
        return self.scale * np.min([s.distance(z) for s in self.lower], axis=0)

    def contains(self, w: np.ndarray, margin: float = 0.0) -> np.ndarray:
        return self.stratum_distance(np.atleast_2d(w)) > self.exclusion + margin

    def sample_grid(self, step: float, limit: Optional[int] = None, rng=None) -> np.ndarray:
        dim = 2 * self.n
        longest = float(np.max(np.linalg.norm(self.quotient.period_basis, axis=0))) * self.scale
        count = max(1, int(math.ceil(longest / step)))
        if limit is not None and float(count) ** dim > limit:
            rng = rng or np.random.default_rng(0)
            idx = rng.integers(0, count, size=(limit, dim))
        else:
            idx = np.array(list(itertools.product(range(count), repeat=dim)))
        pts = self.quotient.from_lattice_coords(idx / count) * self.scale
        return pts[self.contains(pts)]

    def to_json(self) -> dict:
        return {
            "kind": "torus",
            "name": self.quotient.name,
            "scale": self.scale,
            "exclusion": self.exclusion,
            "lower_strata": len(self.lower),
        }


@dataclass(frozen=True)
class PointRegion(Region):
    n: int
    point: tuple

    def contains(self, w: np.ndarray, margin: float = 0.0) -> np.ndarray:
        w = np.atleast_2d(w)
        return np.linalg.norm(w - np.array(self.point)[None, :], axis=-1) <= DISTANCE_TOL

    def sample_grid(self, step: float, limit: Optional[int] = None, rng=None) -> np.ndarray:
        return np.array([self.point], dtype=complex)

    def to_json(self) -> dict:
        return {"kind": "point", "n": self.n, "point": [[c.real, c.imag] for c in self.point]}


@dataclass(frozen=True, eq=False)
class SubspaceRegion(Region):
    """Ball of a complex linear subspace minus the exclusion-neighbourhoods of smaller fixed loci."""

    n: int
    basis: np.ndarray
    radius: float
    exclusion: float = 0.0
    lower: tuple = ()

    def contains(self, w: np.ndarray, margin: float = 0.0) -> np.ndarray:
        w = np.atleast_2d(w)
        space = ComplexSubspace(self.n, self.basis)
        inside = space.distance(w) <= 1e-6 * max(1.0, self.radius)
        inside &= np.linalg.norm(w, axis=-1) <= self.radius - margin + DISTANCE_TOL
        if self.lower:
            inside &= np.min([s.distance(w) for s in self.lower], axis=0) > self.exclusion + margin
        return inside

    def sample_grid(self, step: float, limit: Optional[int] = None, rng=None) -> np.ndarray:
        rank = self.basis.shape[0]
        r = self.radius
        coeffs = _box_grid(rank, np.full(2 * rank, -r), np.full(2 * rank, r), step, limit, rng)
        pts = coeffs @ self.basis
        return pts[self.contains(pts)]

    def to_json(self) -> dict:
        return {
            "kind": "subspace",
            "n": self.n,
            "rank": int(self.basis.shape[0]),
            "radius": self.radius,
            "exclusion": self.exclusion,
            "lower": [s.to_json() for s in self.lower],
        }


@dataclass(eq=False)
class SeparatedLattice:
    points: np.ndarray
    families: np.ndarray
    params: LatticeConstants
    region: Region
    action: Optional[FiniteUnitaryAction] = None
    quotient: Optional[TorusQuotient] = field(default=None, repr=False)
    scale: float = 1.0
    repair: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.points.shape[1] if self.points.ndim == 2 else self.region.n

    def __len__(self) -> int:
        return len(self.points)

    @property
    def family_count(self) -> int:
        return int(len(np.unique(self.families))) if len(self.families) else 0

    @property
    def family_constant(self) -> float:
        return self.family_count / max(self.params.D, 1.0) ** self.params.m

    @property
    def z_points(self) -> np.ndarray:
        return self.points / self.scale

    def family_members(self, family: int) -> np.ndarray:
        return np.nonzero(self.families == family)[0]

    def to_json(self) -> dict:
        return {
            "params": self.params.to_json(),
            "region": self.region.to_json(),
            "scale": self.scale,
            "size": len(self),
            "family_count": self.family_count,
            "family_constant": self.family_constant,
            "group_order": self.action.order if self.action else 1,
            "repair": dict(self.repair),
        }

    def csv_rows(self) -> list[dict]:
        rows = []
        for idx, (w, fam) in enumerate(zip(self.points, self.families)):
            row = {"index": idx, "family": int(fam)}
            for j, c in enumerate(w):
                row[f"re_{j}"] = float(c.real)
                row[f"im_{j}"] = float(c.imag)
            rows.append(row)
        return rows


def _trivial_action(n: int) -> FiniteUnitaryAction:
    return build_group([], dimension=n)


def _empty(n: int, params: LatticeConstants, region: Region, action=None, **kwargs) -> SeparatedLattice:
    return SeparatedLattice(
        np.zeros((0, n), dtype=complex), np.zeros(0, dtype=int), params, region, action, **kwargs
    )


def _relabel(keys: np.ndarray) -> np.ndarray:
    if len(keys) == 0:
        return np.zeros(0, dtype=int)
    _, inverse = np.unique(keys, axis=0, return_inverse=True)
    return inverse.reshape(-1).astype(int)


def lattice_1d(order: int, D: float, radius: float, spacing: float = 1.0) -> SeparatedLattice:
    """Integer points of C with C D < |z| <= radius, families by residues mod ceil(D) and 2k sectors."""
    if D < 1:
        raise ValueError(f"D must be at least 1, got {D}")
    C = sector_constant(order)
    exclusion = C * D if order > 1 else 0.0
    if order > 1 and radius <= exclusion:
        raise DegenerateRadius(f"radius {radius} does not exceed C D = {exclusion}")
    M = int(math.ceil(D / spacing))
    bound = int(math.floor(radius / spacing))
    ticks = np.arange(-bound, bound + 1)
    ii, jj = np.meshgrid(ticks, ticks, indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    z = spacing * (ii + 1j * jj)
    modulus = np.abs(z)
    keep = modulus <= radius + DISTANCE_TOL
    if order > 1:
        keep &= modulus > exclusion
    ii, jj, z = ii[keep], jj[keep], z[keep]
    if order > 1:
        angle = np.mod(np.angle(z), 2.0 * math.pi)
        sector = np.floor(angle / (math.pi / order)).astype(int) % (2 * order)
    else:
        sector = np.zeros(len(z), dtype=int)
    families = _relabel(np.stack([np.mod(ii, M), np.mod(jj, M), sector], axis=1))
    action = build_group([np.array([[np.exp(2j * math.pi / order)]])], dimension=1)
    region = BallRegion(1, radius, exclusion, (ComplexSubspace(1, np.zeros((0, 1), dtype=complex)),) if order > 1 else ())
    params = LatticeConstants(C, D, 2, spacing, exclusion, D)
    logger.debug(f"lattice_1d order={order} D={D} radius={radius}: {len(z)} points, {len(np.unique(families))} families")
    return SeparatedLattice(z[:, None], families, params, region, action)


def plain_lattice(region: Region, D: float, spacing: float = 1.0) -> SeparatedLattice:
    """Grid points of a bounded region with ceil(D)^{2n} residue families and no group."""
    n = region.n
    pts = region.sample_grid(spacing)
    M = int(math.ceil(D / spacing))
    idx = np.round(complex_to_real(pts) / spacing).astype(int) if len(pts) else np.zeros((0, 2 * n), int)
    families = _relabel(np.mod(idx, M))
    params = LatticeConstants(1.0, D, 2 * n, spacing, 0.0, D)
    return SeparatedLattice(pts.reshape(-1, n), families, params, region, None)


def lattice_product(
    first: SeparatedLattice,
    second: SeparatedLattice,
    boundary1: SeparatedLattice,
    boundary2: SeparatedLattice,
    action: Optional[FiniteUnitaryAction] = None,
) -> SeparatedLattice:
    """(L1 x L2) u (B1 x L2) u (L1 x B2) with product families, one namespace per part."""
    if first.n != boundary1.n or second.n != boundary2.n:
        raise DimensionMismatch("each factor and its boundary lattice must live in the same space")
    if first.n != 1 or second.n != 1:
        raise DimensionMismatch("products are assembled from one-dimensional factors")

    def part(a: SeparatedLattice, b: SeparatedLattice, tag: int):
        if len(a) == 0 or len(b) == 0:
            return np.zeros((0, 2), dtype=complex), np.zeros((0, 3), dtype=int)
        ia, ib = np.meshgrid(np.arange(len(a)), np.arange(len(b)), indexing="ij")
        ia, ib = ia.ravel(), ib.ravel()
        pts = np.concatenate([a.points[ia], b.points[ib]], axis=1)
        keys = np.stack([np.full(len(ia), tag), a.families[ia], b.families[ib]], axis=1)
        return pts, keys

    pieces = [part(first, second, 0), part(boundary1, second, 1), part(first, boundary2, 2)]
    pts = np.concatenate([p for p, _ in pieces], axis=0)
    keys = np.concatenate([k for _, k in pieces], axis=0)
    if action is None:
        gens = []
        for factor, slot in ((first, 0), (second, 1)):
            if factor.action is not None:
                for h in factor.action.non_identity():
                    g = np.eye(2, dtype=complex)
                    g[slot, slot] = factor.action.matrix(h)[0, 0]
                    gens.append(g)
        action = build_group(gens, dimension=2)
    params = LatticeConstants(
        C=max(first.params.C, second.params.C),
        D=min(first.params.D, second.params.D),
        m=max(first.params.m, second.params.m),
        R=max(first.params.R, second.params.R),
        exclusion_radius=max(first.params.exclusion_radius, second.params.exclusion_radius),
        separation=min(first.params.separation, second.params.separation),
    )
    region = ProductRegion(first.region, second.region, boundary1.region, boundary2.region)
    return SeparatedLattice(pts, _relabel(keys), params, region, action)


def lattice_union_refine(
    first: SeparatedLattice,
    second: SeparatedLattice,
    action: Optional[FiniteUnitaryAction] = None,
) -> SeparatedLattice:
    """Keep L1 away from Sing(rho_2); split each family of L1 by the first L2 family within distance 1."""
    if first.n != second.n:
        raise IncompatibleRegions(f"lattices live in C^{first.n} and C^{second.n}")
    n = first.n
    act2 = second.action or _trivial_action(n)
    sing2 = tuple(singular_set(act2))
    exclusion2 = second.params.exclusion_radius
    away = BallRegion(n, math.inf, exclusion2, sing2)
    keep = away.contains(first.points) if len(first) else np.zeros(0, dtype=bool)
    pts = first.points[keep]
    fam1 = first.families[keep]
    refined = np.full(len(pts), -1, dtype=int)
    if act2.order == 1:
        # nothing to separate against; the first partition stands
        refined[:] = 0
    elif len(pts) and len(second):
        tree = cKDTree(complex_to_real(second.points))
        neighbours = tree.query_ball_point(complex_to_real(pts), 1.0 + DISTANCE_TOL)
        for i, hits in enumerate(neighbours):
            if hits:
                refined[i] = int(np.min(second.families[hits]))
    missing = int(np.sum(refined < 0))
    if missing:
        logger.debug(f"{missing} points of the first lattice have no second-lattice point within 1")
    if action is None:
        act1 = first.action or _trivial_action(n)
        action = build_group(list(act1.elements) + list(act2.elements), dimension=n)
    params = replace(
        first.params,
        m=first.params.m + second.params.m,
        exclusion_radius=max(first.params.exclusion_radius, exclusion2),
        separation=min(first.params.separation, second.params.separation) - 2.0,
    )
    region = IntersectionRegion((first.region, away))
    keys = np.stack([fam1, refined], axis=1) if len(pts) else np.zeros((0, 2), dtype=int)
    return SeparatedLattice(pts, _relabel(keys), params, region, action)


def _orbit_images(
    points: np.ndarray,
    action: FiniteUnitaryAction,
    quotient: Optional[TorusQuotient],
    scale: float,
) -> np.ndarray:
    """(|H|, N, n) images, reduced into the fundamental domain on a torus."""
    images = np.stack([action.act(h, points) for h in range(action.order)])
    if quotient is not None and len(points):
        flat = images.reshape(-1, points.shape[1])
        images = (quotient.reduce(flat / scale) * scale).reshape(images.shape)
    return images


def _period_offsets(
    quotient: Optional[TorusQuotient], scale: float, reach: float, n: int = 1
) -> np.ndarray:
    """Period translates (g_k units) that can bring a reduced point within `reach`; zero on a chart."""
    if quotient is None:
        return np.zeros((1, n), dtype=complex)
    smin = float(np.linalg.svd(quotient.period_basis, compute_uv=False).min())
    T = max(1, int(math.ceil(reach / (scale * smin))))
    ms = np.array(list(itertools.product(range(-T, T + 1), repeat=2 * quotient.n)), dtype=float)
    return quotient.from_lattice_coords(ms) * scale


def _family_conflicts(
    points: np.ndarray,
    images: np.ndarray,
    identity: int,
    offsets: np.ndarray,
    D: float,
) -> tuple[list[set], np.ndarray]:
    """Adjacency of pairs with d(x_a, h x_b + offset) < D, plus points conflicting with themselves."""
    count = len(points)
    adjacency = [set() for _ in range(count)]
    self_conflict = np.zeros(count, dtype=bool)
    if count == 0:
        return adjacency, self_conflict
    zero_offset = int(np.argmin(np.linalg.norm(offsets, axis=-1)))
    group_order = images.shape[0]
    target = (images[:, None, :, :] + offsets[None, :, None, :]).reshape(-1, points.shape[1])
    owner = np.tile(np.arange(count), group_order * len(offsets))
    trivial = np.zeros((group_order, len(offsets), count), dtype=bool)
    trivial[identity, zero_offset, :] = True
    trivial = trivial.reshape(-1)
    tree_p = cKDTree(complex_to_real(points))
    tree_t = cKDTree(complex_to_real(target))
    hits = tree_p.query_ball_tree(tree_t, D - DISTANCE_TOL)
    for a, found in enumerate(hits):
        for t in found:
            b = int(owner[t])
            if b == a:
                # stabilizer elements map the point to itself
                if not trivial[t] and np.linalg.norm(target[t] - points[a]) > 1e-7:
                    self_conflict[a] = True
                continue
            adjacency[a].add(b)
            adjacency[b].add(a)
    return adjacency, self_conflict


def separate_families(
    points: np.ndarray,
    families: np.ndarray,
    action: FiniteUnitaryAction,
    D: float,
    quotient: Optional[TorusQuotient] = None,
    scale: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Greedy colouring inside each family so every family is strongly D-separated.

    Returns (new family labels, keep mask); points too close to their own images are dropped.
    """
    n = points.shape[1]
    images = _orbit_images(points, action, quotient, scale)
    offsets = _period_offsets(quotient, scale, D, n)
    new = np.full(len(points), -1, dtype=int)
    keep = np.ones(len(points), dtype=bool)
    next_id = 0
    for fam in np.unique(families):
        idx = np.nonzero(families == fam)[0]
        adjacency, bad = _family_conflicts(points[idx], images[:, idx], action.identity_index, offsets, D)
        colour = np.full(len(idx), -1, dtype=int)
        for a in range(len(idx)):
            if bad[a]:
                keep[idx[a]] = False
                continue
            used = {colour[b] for b in adjacency[a] if colour[b] >= 0}
            c = 0
            while c in used:
                c += 1
            colour[a] = c
        good = colour >= 0
        if np.any(good):
            new[idx[good]] = next_id + colour[good]
            next_id += int(colour.max()) + 1
    dropped = int(np.sum(~keep))
    if dropped:
        logger.warning(f"Dropped {dropped} lattice points lying within D of their own orbit")
    return _relabel(new[keep]), keep


def _point_keys(points: np.ndarray, quotient: Optional[TorusQuotient], scale: float, decimals: int) -> np.ndarray:
    if quotient is not None:
        x = quotient.lattice_coords(points / scale)
        return np.round(np.mod(np.round(x, decimals), 1.0), decimals)
    return np.round(complex_to_real(points), decimals)


def orbit_representatives(
    points: np.ndarray,
    action: FiniteUnitaryAction,
    quotient: Optional[TorusQuotient] = None,
    scale: float = 1.0,
    decimals: int = 7,
) -> np.ndarray:
    """Index of the lexicographically smallest member of each orbit, sorted by that key."""
    if len(points) == 0:
        return np.zeros(0, dtype=int)
    images = _orbit_images(points, action, quotient, scale)
    own = [tuple(row) for row in _point_keys(points, quotient, scale, decimals).tolist()]
    image_keys = np.stack([_point_keys(images[h], quotient, scale, decimals) for h in range(action.order)])
    best: dict[tuple, tuple] = {}
    for i in range(len(points)):
        canon = min(tuple(image_keys[h, i].tolist()) for h in range(action.order))
        if canon not in best or own[i] < best[canon][0]:
            best[canon] = (own[i], i)
    reps = sorted(best.values())
    return np.array([i for _, i in reps], dtype=int)


def _eigenframe(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unitary V and eigenvalues with matrix = V diag(vals) V^*."""
    vals, vecs = np.linalg.eig(matrix)
    order = np.lexsort((np.round(np.angle(vals), 9),))
    vals, vecs = vals[order], vecs[:, order]
    q, _ = np.linalg.qr(vecs)
    return q, vals


def _eigen_order(value: complex, bound: int) -> int:
    for order in range(1, bound + 1):
        if abs(value**order - 1.0) < 1e-9:
            return order
    return bound


def _cyclic_lattice(action, subgroup, D, radius, spacing) -> tuple[SeparatedLattice, np.ndarray]:
    """Lemma lattice of one cyclic subgroup, in chart coordinates, plus its eigenframe."""
    gen = cyclic_generator(action, subgroup)
    frame, vals = _eigenframe(action.matrix(gen))
    orders = [_eigen_order(v, len(subgroup)) for v in vals]
    factors = []
    for order in orders:
        C = sector_constant(order)
        try:
            main = lattice_1d(order, D, radius, spacing)
        except DegenerateRadius:
            main = _empty(1, LatticeConstants(C, D, 2, spacing, C * D, D), BallRegion(1, 0.0))
        disk_radius = C * D if order > 1 else 0.0
        if order > 1:
            boundary = plain_lattice(BallRegion(1, min(disk_radius, radius)), D, spacing)
        else:
            boundary = _empty(1, LatticeConstants(1.0, D, 2, spacing, 0.0, D), BallRegion(1, -1.0))
        factors.append((main, boundary))
    if len(factors) == 1:
        main, boundary = factors[0]
        pts = np.concatenate([main.points, boundary.points])
        keys = np.concatenate(
            [
                np.stack([np.zeros(len(main), int), main.families], axis=1),
                np.stack([np.ones(len(boundary), int), boundary.families], axis=1),
            ]
        )
        lattice = SeparatedLattice(pts, _relabel(keys), main.params, main.region, main.action)
    elif len(factors) == 2:
        (m1, b1), (m2, b2) = factors
        lattice = lattice_product(m1, m2, b1, b2)
    else:
        raise DimensionMismatch("charts of complex dimension above two are not supported")
    sub_action = build_group([action.matrix(gen)], dimension=action.dimension)
    chart_points = lattice.points @ frame.T
    return replace(lattice, points=chart_points, action=sub_action), frame


def _covering_gaps(lattice: SeparatedLattice, action: FiniteUnitaryAction) -> np.ndarray:
    """Greedy picks among the region's R/4 grid points left farther than R from every image.

    Large regions use the seeded sample that verify_property_p draws by default.
    """
    R = lattice.params.R
    grid = lattice.region.sample_grid(R / 4.0, MAX_GRID_POINTS, np.random.default_rng(0))
    if len(grid) == 0:
        return np.zeros((0, lattice.n), dtype=complex)
    cloud = _full_point_cloud(lattice, action, R + 10.0)
    if len(cloud):
        dist, _ = cKDTree(complex_to_real(cloud)).query(complex_to_real(grid))
        grid = grid[dist > R + DISTANCE_TOL]
    if len(grid) == 0:
        return grid
    tree = cKDTree(complex_to_real(grid))
    open_ = np.ones(len(grid), dtype=bool)
    picked = []
    for i in range(len(grid)):
        if not open_[i]:
            continue
        picked.append(i)
        single = replace(lattice, points=grid[i][None, :], families=np.zeros(1, dtype=int))
        reach = _full_point_cloud(single, action, R + 10.0)
        for hits in tree.query_ball_point(complex_to_real(reach), R + DISTANCE_TOL):
            open_[hits] = False
    return grid[picked]


def _finish_lattice(
    pts: np.ndarray,
    keys: np.ndarray,
    params: LatticeConstants,
    region: Region,
    action: FiniteUnitaryAction,
    quotient: Optional[TorusQuotient] = None,
    scale: float = 1.0,
    repair: Optional[dict] = None,
    fill_gaps: bool = True,
) -> SeparatedLattice:
    """Orbit representatives, recolouring into strongly separated families, then gap filling.

    `repair` records how far the result moved from the constructed families. Gap filling
    needs a region that is the stratum itself, not an ambient neighbourhood of it.
    """
    repair = dict(repair or {})
    reps = orbit_representatives(pts, action, quotient, scale)
    pts, fams = pts[reps], _relabel(keys[reps])
    repair["lemma_families"] = int(len(np.unique(fams)))
    fams, keep = separate_families(pts, fams, action, params.separation, quotient, scale)
    pts = pts[keep]
    repair["split_families"] = max(0, int(len(np.unique(fams))) - repair["lemma_families"])
    repair["dropped"] = int(np.sum(~keep))

    lattice = SeparatedLattice(pts, fams, params, region, action, quotient, scale)
    gaps = _covering_gaps(lattice, action) if fill_gaps else np.zeros((0, lattice.n), dtype=complex)
    repair["gap_points"] = int(len(gaps))
    if len(gaps):
        fresh = int(fams.max()) + 1 if len(fams) else 0
        merged = np.concatenate([fams, np.full(len(gaps), fresh)])
        fams, keep = separate_families(np.concatenate([pts, gaps]), merged, action, params.separation, quotient, scale)
        pts = np.concatenate([pts, gaps])[keep]
        repair["dropped"] += int(np.sum(~keep))
        lattice = SeparatedLattice(pts, fams, params, region, action, quotient, scale)
    if any(repair.get(name, 0) for name in ("split_families", "dropped", "gap_points", "filled")):
        logger.info(f"Lattice repair: {repair}")
    return replace(lattice, repair=repair)


def chart_lemma_lattice(action: FiniteUnitaryAction, R: float, D: float, radius: float) -> SeparatedLattice:
    """The constructive chain alone: a product lattice per cyclic subgroup of the cover, merged
    by union refinement. Points near the singular set are kept; nothing is recoloured.
    """
    cover = cyclic_cover(action)
    merged = _cyclic_lattice(action, cover[0], D, radius, R)[0]
    for sub in cover[1:]:
        merged = lattice_union_refine(merged, _cyclic_lattice(action, sub, D, radius, R)[0], action)
    return merged


def chart_lattice(
    action: FiniteUnitaryAction,
    R: float,
    D: float,
    k: int,
    chart_radius: float = 1.0,
) -> SeparatedLattice:
    """Property-(P) lattice of H x C^n inside the g_k ball of radius chart_radius * sqrt(2 pi k)."""
    if R <= 0 or D < 1:
        raise ValueError(f"need R > 0 and D >= 1, got R={R}, D={D}")
    n = action.dimension
    scale = math.sqrt(k * NU)
    radius = chart_radius * scale
    cover = cyclic_cover(action)
    C_self = self_separation_constant(action)
    exclusion = C_self * D
    singular = tuple(singular_set(action))
    region = BallRegion(n, radius, exclusion, singular)

    merged = chart_lemma_lattice(action, R, D, radius)
    base_frame = _eigenframe(action.matrix(cyclic_generator(action, cover[0])))[0]
    grid = _box_grid(n, np.full(2 * n, -radius), np.full(2 * n, radius), R) @ base_frame.T
    grid = grid[region.contains(grid)]
    inside = region.contains(merged.points) if len(merged) else np.zeros(0, dtype=bool)
    pts = merged.points[inside]
    filled = 0
    keys = np.stack([np.zeros(len(pts), int), merged.families[inside]], axis=1)
    if len(grid):
        if len(pts):
            dist, _ = cKDTree(complex_to_real(pts)).query(complex_to_real(grid))
            extra = grid[dist > 1e-6]
        else:
            extra = grid
        if len(extra):
            local = extra @ base_frame.conj()
            idx = np.round(complex_to_real(local) / R).astype(int)
            M = int(math.ceil(D / R))
            extra_keys = np.concatenate(
                [np.ones((len(extra), 1), int), _relabel(np.mod(idx, M))[:, None]], axis=1
            )
            pts = np.concatenate([pts, extra])
            keys = np.concatenate([keys, extra_keys])
            filled = len(extra)
    if len(pts) == 0:
        raise DegenerateRadius(f"chart of g_k radius {radius:.2f} has no room outside C D = {exclusion:.2f}")

    params = LatticeConstants(
        C=max(merged.params.C, C_self),
        D=D,
        m=merged.params.m,
        R=R,
        exclusion_radius=exclusion,
        separation=D,
    )
    repair = {"outside_region": int(np.sum(~inside)), "filled": filled}
    lattice = _finish_lattice(pts, keys, params, region, action, None, scale, repair)
    logger.info(
        f"Chart lattice |H|={action.order} k={k} D={D}: {len(lattice)} orbit representatives, "
        f"{lattice.family_count} families"
    )
    return lattice


def _shortest_period(quotient: TorusQuotient) -> float:
    dim = 2 * quotient.n
    ms = np.array([m for m in itertools.product(range(-2, 3), repeat=dim) if any(m)], dtype=float)
    return float(np.min(np.linalg.norm(quotient.from_lattice_coords(ms), axis=-1)))


def torus_grid_count(quotient: TorusQuotient, scale: float, R: float, D: float) -> tuple[int, int]:
    """Subdivisions N per period and residue modulus M, with M | N and residue classes D apart."""
    longest = float(np.max(np.linalg.norm(quotient.period_basis, axis=0))) * scale
    step = 2.0 * R / math.sqrt(2 * quotient.n)
    N_min = int(math.ceil(longest / step))
    blocks = max(1, int(math.floor(_shortest_period(quotient) * scale / D)))
    M = int(math.ceil(N_min / blocks))
    return M * blocks, M


def stratum_lattice(
    quotient: TorusQuotient,
    stratum: Stratum,
    R: float,
    D: float,
    k: int,
    lower: Sequence[Stratum] = (),
    exclusion_constant: Optional[float] = None,
) -> SeparatedLattice:
    """Lattice on X_{tau,k,CD}: one point for a point stratum, a glued periodic grid otherwise."""
    scale = math.sqrt(k * NU)
    action = quotient.group
    n = quotient.n
    C_self = self_separation_constant(action) if exclusion_constant is None else exclusion_constant
    exclusion = C_self * D
    if stratum.is_point:
        point = stratum.points[0] * scale
        params = LatticeConstants(C_self, D, 0, R, 0.0, D)
        region = PointRegion(n, tuple(point))
        return SeparatedLattice(point[None, :], np.zeros(1, dtype=int), params, region, action, quotient, scale)

    lower = tuple(s for s in lower if s is not stratum)
    region = TorusRegion(quotient, scale, lower, exclusion)
    if stratum.is_top:
        N, M = torus_grid_count(quotient, scale, R, D)
        ticks = np.arange(N)
        idx = np.array(list(itertools.product(ticks, repeat=2 * n)), dtype=int)
        pts = quotient.from_lattice_coords(idx / N) * scale
        keys = np.mod(idx, M)
    else:
        samples = np.concatenate([c.samples for c in stratum.orbit])
        pts = quotient.from_lattice_coords(samples) * scale
        keys = np.zeros((len(pts), 1), dtype=int)
    inside = region.contains(pts)
    pts, keys = pts[inside], keys[inside]
    if len(pts) == 0:
        raise EmptyStratumRegion(
            f"No room on {quotient.name or 'the torus'} at k={k} outside exclusion radius {exclusion:.2f}"
        )
    params = LatticeConstants(C_self, D, 2 * n, R, exclusion, D)
    lattice = _finish_lattice(pts, keys, params, region, action, quotient, scale, fill_gaps=stratum.is_top)
    logger.info(
        f"Stratum lattice on {quotient.name or 'torus'} k={k} D={D}: {len(lattice)} points, "
        f"{lattice.family_count} families"
    )
    return lattice


@dataclass
class PropertyReport:
    covering_ok: bool
    separation_ok: bool
    distribution_constant: float
    weighted_sums: dict
    violations: int = 0
    uncovered: int = 0
    grid_points: int = 0
    family_count: int = 0
    size: int = 0

    @property
    def ok(self) -> bool:
        return self.covering_ok and self.separation_ok

    def to_json(self) -> dict:
        return {
            "covering_ok": self.covering_ok,
            "separation_ok": self.separation_ok,
            "distribution_constant": self.distribution_constant,
            "weighted_sums": {str(r): v for r, v in self.weighted_sums.items()},
            "violations": self.violations,
            "uncovered": self.uncovered,
            "grid_points": self.grid_points,
            "family_count": self.family_count,
            "size": self.size,
        }


def _full_point_cloud(lattice: SeparatedLattice, action: FiniteUnitaryAction, reach: float) -> np.ndarray:
    """Every group image of every lattice point, plus period translates on a torus."""
    if len(lattice) == 0:
        return np.zeros((0, lattice.n), dtype=complex)
    images = _orbit_images(lattice.points, action, lattice.quotient, lattice.scale).reshape(-1, lattice.n)
    if lattice.quotient is None:
        return images
    offsets = _period_offsets(lattice.quotient, lattice.scale, reach, lattice.n)
    cloud = (images[None, :, :] + offsets[:, None, :]).reshape(-1, lattice.n)
    smin = float(np.linalg.svd(lattice.quotient.period_basis, compute_uv=False).min())
    margin = reach / (lattice.scale * smin)
    x = lattice.quotient.lattice_coords(cloud / lattice.scale)
    near = np.all((x >= -margin) & (x <= 1.0 + margin), axis=-1)
    return cloud[near]


def verify_property_p(
    lattice: SeparatedLattice,
    action: Optional[FiniteUnitaryAction] = None,
    D: Optional[float] = None,
    grid_step: Optional[float] = None,
    r_max: int = 3,
    samples: int = 1000,
    seed: int = 0,
    R: Optional[float] = None,
) -> PropertyReport:
    """Brute-force check of covering, strong separation and even distribution."""
    action = action or lattice.action or _trivial_action(lattice.n)
    D = lattice.params.separation if D is None else D
    R = lattice.params.R if R is None else R
    grid_step = R / 4.0 if grid_step is None else grid_step
    rng = np.random.default_rng(seed)

    violations = 0
    offsets = _period_offsets(lattice.quotient, lattice.scale, D, lattice.n)
    images = _orbit_images(lattice.points, action, lattice.quotient, lattice.scale)
    for fam in np.unique(lattice.families):
        idx = lattice.family_members(fam)
        adjacency, bad = _family_conflicts(lattice.points[idx], images[:, idx], action.identity_index, offsets, D)
        violations += int(np.sum(bad)) + sum(len(a) for a in adjacency) // 2

    # the whole region, boundary shells included
    grid = lattice.region.sample_grid(grid_step, MAX_GRID_POINTS, rng)
    cloud = _full_point_cloud(lattice, action, R + 10.0)
    uncovered = 0
    if len(grid):
        if len(cloud) == 0:
            uncovered = len(grid)
        else:
            dist, _ = cKDTree(complex_to_real(cloud)).query(complex_to_real(grid))
            uncovered = int(np.sum(dist > R + DISTANCE_TOL))

    distribution = 0.0
    weighted = {r: 0.0 for r in range(r_max + 1)}
    if len(cloud):
        tree = cKDTree(complex_to_real(cloud))
        pool = lattice.region.sample_grid(max(grid_step, R / 2.0), MAX_GRID_POINTS, rng)
        if len(pool) == 0:
            pool = lattice.points
        centres = pool[rng.choice(len(pool), min(samples, len(pool)), replace=False)]
        real_centres = complex_to_real(centres)
        dim = 2 * lattice.n
        for s in (1.0, 2.0, 4.0):
            counts = np.array([len(h) for h in tree.query_ball_point(real_centres, s)])
            distribution = max(distribution, float(np.max(counts)) / s**dim)
        cutoff = 10.0
        for i, near in enumerate(tree.query_ball_point(real_centres, cutoff)):
            if not near:
                continue
            d = np.linalg.norm(complex_to_real(cloud[near]) - real_centres[i], axis=-1)
            envelope = np.exp(-(d**2) / 5.0)
            for r in weighted:
                weighted[r] = max(weighted[r], float(np.sum(d**r * envelope)))

    report = PropertyReport(
        covering_ok=uncovered == 0,
        separation_ok=violations == 0,
        distribution_constant=distribution,
        weighted_sums=weighted,
        violations=violations,
        uncovered=uncovered,
        grid_points=len(grid),
        family_count=lattice.family_count,
        size=len(lattice),
    )
    logger.info(
        f"Property (P): covering={report.covering_ok} separation={report.separation_ok} "
        f"F/s^2n<={distribution:.3f} violations={violations} uncovered={uncovered}"
    )
    return report


def tightness_fraction(
    lattice: SeparatedLattice,
    action: Optional[FiniteUnitaryAction] = None,
    trials: int = 20,
    seed: int = 0,
) -> float:
    """Share of sampled single-point removals that leave the removed point's site uncovered."""
    action = action or lattice.action or _trivial_action(lattice.n)
    if len(lattice) < 2:
        return 1.0
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(lattice), min(trials, len(lattice)), replace=False)
    R = lattice.params.R
    broken = 0
    for i in picks:
        rest = replace(
            lattice,
            points=np.delete(lattice.points, i, axis=0),
            families=np.delete(lattice.families, i),
        )
        cloud = _full_point_cloud(rest, action, R + 8.0)
        dist, _ = cKDTree(complex_to_real(cloud)).query(complex_to_real(lattice.points[i][None, :]))
        broken += int(dist[0] > R + DISTANCE_TOL)
    return broken / len(picks)


def subspace_lattice(
    action: FiniteUnitaryAction,
    stratum: Stratum,
    R: float,
    D: float,
    k: int,
    chart_radius: float = 1.0,
    lower: Sequence[Stratum] = (),
    exclusion_constant: Optional[float] = None,
) -> SeparatedLattice:
    """Lattice on a non-top chart stratum: the origin, or a grid on Fix(K) away from smaller loci."""
    n = action.dimension
    scale = math.sqrt(k * NU)
    C_self = self_separation_constant(action) if exclusion_constant is None else exclusion_constant
    exclusion = C_self * D
    if stratum.is_point:
        point = np.zeros(n, dtype=complex)
        params = LatticeConstants(C_self, D, 0, R, 0.0, D)
        return SeparatedLattice(point[None, :], np.zeros(1, dtype=int), params, PointRegion(n, tuple(point)), action, None, scale)

    smaller = tuple(space for s in lower if s is not stratum for space in s.orbit)
    basis = stratum.fixed_subspace.basis
    region = SubspaceRegion(n, basis, chart_radius * scale, exclusion, smaller)
    rank = basis.shape[0]
    r = region.radius
    coeffs = _box_grid(rank, np.full(2 * rank, -r), np.full(2 * rank, r), R)
    pts = coeffs @ basis
    idx = np.round(complex_to_real(coeffs) / R).astype(int)
    inside = region.contains(pts) if len(pts) else np.zeros(0, dtype=bool)
    pts, idx = pts[inside], idx[inside]
    if len(pts) == 0:
        return _empty(n, LatticeConstants(C_self, D, 2 * rank, R, exclusion, D), region, action, scale=scale)
    M = int(math.ceil(D / R))
    params = LatticeConstants(C_self, D, 2 * rank, R, exclusion, D)
    lattice = _finish_lattice(pts, np.mod(idx, M), params, region, action, None, scale)
    logger.info(f"Subspace lattice |K|={stratum.subgroup.order} rank={rank}: {len(lattice)} points")
    return lattice


def build_domain_lattices(
    domain,
    poset,
    R: float | Sequence[float],
    D: float | Sequence[float],
    k: int,
    chart_radius: float = 1.0,
) -> list[Optional[SeparatedLattice]]:
    """One lattice per stratum in poset order; R and D are shared or given per stratum.

    A stratum whose region is swallowed by the exclusion of smaller strata gets None.
    """
    size = len(poset.strata)
    Rs = [float(R)] * size if np.isscalar(R) else [float(r) for r in R]
    Ds = [float(D)] * size if np.isscalar(D) else [float(d) for d in D]
    return [stratum_lattice_for(domain, poset, i, Rs[i], Ds[i], k, chart_radius) for i in range(size)]


def stratum_lattice_for(
    domain,
    poset,
    index: int,
    R: float,
    D: float,
    k: int,
    chart_radius: float = 1.0,
) -> Optional[SeparatedLattice]:
    stratum = poset.strata[index]
    lower = [poset.strata[j] for j in poset.below(index)]
    try:
        if isinstance(domain, TorusQuotient):
            everything_lower = [s for s in poset.strata if not s.is_top]
            return stratum_lattice(domain, stratum, R, D, k, lower=everything_lower if stratum.is_top else lower)
        if stratum.is_top:
            return chart_lattice(domain.group, R, D, k, chart_radius)
        return subspace_lattice(domain.group, stratum, R, D, k, chart_radius, lower)
    except (EmptyStratumRegion, DegenerateRadius) as e:
        logger.warning(f"Stratum {index} gets no lattice: {e}")
        return None
