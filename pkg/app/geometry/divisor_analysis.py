"""Zero sets of certified sections and the checks run on them: symplecticity, invariance,
connectivity, the Chern count and the Morse indices of log|s|^2 away from the divisor.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import root
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from app.errors import (
    DegenerateHessian,
    NewtonDivergence,
    NoCriticalPointFound,
    NotCertified,
    ResolutionTooCoarse,
)
from app.geometry.bundle_sections import ModelChart, Section, TorusQuotient
from app.geometry.group_rep import FiniteUnitaryAction, complex_to_real, real_to_complex
from app.geometry.strata import StrataPoset
from app.geometry.transversality import (
    SampleGrid,
    TransversalityCertificate,
    chart_grid,
    derivative_bounds,
    domain_grid,
    measure_eta,
)

logger = logging.getLogger(__name__)

ZERO_TOL = 1e-10
MERGE_RADIUS = 0.05
NEWTON_STEPS = 40
GRADIENT_TOL = 1e-8
EIGEN_TOL = 1e-8
SYMPLECTIC_TOL = 1e-6
DEFAULT_CHART_RADIUS = 3.0


def _error_json(errors: list) -> list[dict]:
    return [{"type": type(e).__name__, "module": e.module, "message": str(e)} for e in errors]


# real-coordinate derivatives


def _wirtinger_to_real(n: int) -> tuple[np.ndarray, np.ndarray]:
    """d/dx_j = d_j + dbar_j and d/dy_j = i (d_j - dbar_j), rows ordered (x, y)."""
    eye = np.eye(n)
    A = np.concatenate([eye, 1j * eye]).astype(complex)
    B = np.concatenate([eye, -1j * eye]).astype(complex)
    return A, B


def real_jacobian(section: Section, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Values s and real partials ds/dx_a (g_k units), shapes (m,) and (m, 2n)."""
    jet = section.jet(points, order=1)
    A, B = _wirtinger_to_real(section.n)
    return jet.value, jet.d @ A.T + jet.db @ B.T


def log_norm_derivatives(section: Section, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """f = log|s|^2 with its real gradient and Hessian in g_k coordinates."""
    jet = section.jet(points, order=2)
    A, B = _wirtinger_to_real(section.n)
    s = jet.value
    first = jet.d @ A.T + jet.db @ B.T
    second = (
        np.einsum("aj,bl,mjl->mab", A, A, jet.dd)
        + np.einsum("aj,bl,mjl->mab", A, B, jet.ddb)
        + np.einsum("aj,bl,mlj->mab", B, A, jet.ddb)
        + np.einsum("aj,bl,mjl->mab", B, B, jet.dbdb)
    )
    mod2 = np.abs(s) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        f = np.log(mod2)
        grad = 2.0 * np.real(s.conj()[:, None] * first) / mod2[:, None]
        hess = (
            2.0
            * np.real(first.conj()[:, None, :] * first[:, :, None] + s.conj()[:, None, None] * second)
            / mod2[:, None, None]
            - grad[:, :, None] * grad[:, None, :]
        )
    return f, grad, hess


def finite_difference_hessian(section: Section, point: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central differences of log|s|^2 in g_k coordinates around one z point."""
    n = section.n
    x0 = complex_to_real(np.atleast_2d(point))[0] * section.scale
    dim = 2 * n

    def f(x):
        z = real_to_complex(np.atleast_2d(x)) / section.scale
        return np.log(np.abs(section.values(z)) ** 2)

    hess = np.zeros((dim, dim))
    for a, b in itertools.product(range(dim), repeat=2):
        ea = np.eye(dim)[a] * step
        eb = np.eye(dim)[b] * step
        stencil = np.stack([x0 + ea + eb, x0 + ea - eb, x0 - ea + eb, x0 - ea - eb])
        v = f(stencil)
        hess[a, b] = (v[0] - v[1] - v[2] + v[3]) / (4.0 * step * step)
    return hess


# neighbour graphs


def _pairs(points: np.ndarray, radius: float, domain, scale: float) -> np.ndarray:
    """Index pairs (i, j), i < j, with g_k distance below radius (modulo periods on a torus)."""
    if len(points) < 2:
        return np.zeros((0, 2), dtype=int)
    real = complex_to_real(points) * scale
    tree = cKDTree(real)
    if isinstance(domain, TorusQuotient):
        dim = 2 * domain.n
        shifts = np.array(list(itertools.product((-1, 0, 1), repeat=dim)), dtype=float)
        offsets = complex_to_real(domain.from_lattice_coords(shifts)) * scale
        cloud = (real[None, :, :] + offsets[:, None, :]).reshape(-1, real.shape[1])
        owner = np.tile(np.arange(len(points)), len(offsets))
        found = tree.query_ball_point(cloud, radius)
        pairs = {(min(i, int(owner[c])), max(i, int(owner[c]))) for c, hits in enumerate(found) for i in hits}
    else:
        pairs = tree.query_pairs(radius)
    pairs = sorted((i, j) for i, j in pairs if i != j)
    return np.array(pairs, dtype=int).reshape(-1, 2)


def _labels(count: int, pairs: np.ndarray) -> np.ndarray:
    if count == 0:
        return np.zeros(0, dtype=int)
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(count, count))
    _, labels = connected_components(graph, directed=False)
    return labels


def _nearest_distance(points: np.ndarray, targets: np.ndarray, domain, scale: float) -> np.ndarray:
    """g_k distance from each target to the nearest stored point."""
    if len(points) == 0:
        return np.full(len(targets), np.inf)
    if isinstance(domain, TorusQuotient):
        points = domain.reduce(points)
        targets = domain.reduce(targets)
        dim = 2 * domain.n
        shifts = np.array(list(itertools.product((-1, 0, 1), repeat=dim)), dtype=float)
        offsets = domain.from_lattice_coords(shifts)
        points = (points[None, :, :] + offsets[:, None, :]).reshape(-1, points.shape[1])
    dist, _ = cKDTree(complex_to_real(points) * scale).query(complex_to_real(targets) * scale)
    return dist


# zero sets


@dataclass
class ZeroSetSample:
    points: np.ndarray
    domain: object
    scale: float
    resolution: float
    norm_del: np.ndarray = None
    norm_delbar: np.ndarray = None
    tangent_symplectic_min: np.ndarray = None
    components: np.ndarray = None
    seeds: int = 0
    errors: list = field(default_factory=list)
    winding_count: Optional[int] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=complex).reshape(-1, self.domain.n)
        count = len(self.points)
        if self.norm_del is None:
            self.norm_del = np.full(count, np.nan)
        if self.norm_delbar is None:
            self.norm_delbar = np.full(count, np.nan)
        if self.tangent_symplectic_min is None:
            self.tangent_symplectic_min = np.full(count, np.nan)
        if self.components is None:
            self.components = _labels(count, _pairs(self.points, self.linking_radius, self.domain, self.scale))

    @property
    def n(self) -> int:
        return self.domain.n

    @property
    def linking_radius(self) -> float:
        return 2.0 * self.resolution

    def __len__(self) -> int:
        return len(self.points)

    def component_count(self) -> int:
        return int(len(np.unique(self.components))) if len(self.points) else 0

    def orbit_count(self, action: Optional[FiniteUnitaryAction] = None) -> int:
        """Number of G-orbits among the zeros (zeros of the quotient divisor when n = 1)."""
        action = action or self.domain.group
        if len(self.points) == 0:
            return 0
        seen = np.zeros(len(self.points), dtype=bool)
        orbits = 0
        for i in range(len(self.points)):
            if seen[i]:
                continue
            orbits += 1
            images = np.stack([action.act(h, self.points[i][None, :])[0] for h in range(action.order)])
            for img in images:
                dist = _nearest_distance(img[None, :], self.points, self.domain, self.scale)
                seen |= dist < MERGE_RADIUS
        return orbits

    def csv_rows(self) -> list[dict]:
        rows = []
        for i, z in enumerate(self.points):
            row = {"index": i, "component": int(self.components[i])}
            for j, c in enumerate(z):
                row[f"re_{j}"] = float(c.real)
                row[f"im_{j}"] = float(c.imag)
            row["norm_del"] = float(self.norm_del[i])
            row["norm_delbar"] = float(self.norm_delbar[i])
            row["tangent_symplectic_min"] = float(self.tangent_symplectic_min[i])
            rows.append(row)
        return rows

    def to_json(self) -> dict:
        return {
            "count": len(self),
            "seeds": self.seeds,
            "resolution": self.resolution,
            "linking_radius": self.linking_radius,
            "components": self.component_count(),
            "winding_count": self.winding_count,
            "errors": _error_json(self.errors),
        }


def _newton(section: Section, seeds: np.ndarray, max_move: float) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Newton on Re s = Im s = 0 with minimum-norm steps; returns (points, converged)."""
    z = seeds.copy()
    scale = section.scale
    active = np.ones(len(z), dtype=bool)
    converged = np.zeros(len(z), dtype=bool)
    for _ in range(NEWTON_STEPS):
        if not np.any(active):
            break
        idx = np.nonzero(active)[0]
        value, jac = real_jacobian(section, z[idx])
        done = np.abs(value) < ZERO_TOL
        converged[idx[done]] = True
        active[idx[done]] = False
        idx, value, jac = idx[~done], value[~done], jac[~done]
        if len(idx) == 0:
            break
        J = np.stack([jac.real, jac.imag], axis=1)
        F = np.stack([value.real, value.imag], axis=1)
        step = np.einsum("mab,mb->ma", np.linalg.pinv(J), F)
        z[idx] = z[idx] - real_to_complex(step) / scale
        moved = np.linalg.norm(complex_to_real(z[idx] - seeds[idx]), axis=-1) * scale
        lost = moved > max_move
        active[idx[lost]] = False
    if np.any(active):
        value, _ = real_jacobian(section, z[active])
        converged[np.nonzero(active)[0][np.abs(value) < ZERO_TOL]] = True
    return z, converged


def zero_diagnostics(section: Section, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """|del s|, |delbar s| and the smallest singular value of omega on ker ds (nan for n = 1)."""
    if len(points) == 0:
        empty = np.zeros(0)
        return empty, empty, empty
    field = section.evaluate(points)
    n = section.n
    sympl = np.full(len(points), np.nan)
    if n >= 2:
        _, jac = real_jacobian(section, points)
        eye = np.eye(n)
        omega = np.block([[np.zeros((n, n)), eye], [-eye, np.zeros((n, n))]])
        for i in range(len(points)):
            K = null_space(np.stack([jac[i].real, jac[i].imag]))
            sympl[i] = float(np.min(np.linalg.svd(K.T @ omega @ K, compute_uv=False)))
    return field.del_norm, field.dbar_norm, sympl


def winding_count(section: Section, grid: SampleGrid, per_edge: int = 16) -> int:
    """Sum over grid cells of (1/2 pi) times the winding of s around the cell boundary (n = 1)."""
    if section.n != 1 or len(grid.points) == 0:
        raise ValueError("winding numbers need a one-dimensional grid")
    e1 = real_to_complex(grid.cell[:, 0][None, :])[0, 0] / grid.scale
    e2 = real_to_complex(grid.cell[:, 1][None, :])[0, 0] / grid.scale
    corners = [-(e1 + e2) / 2, (e1 - e2) / 2, (e1 + e2) / 2, (e2 - e1) / 2]
    t = np.arange(per_edge) / per_edge
    loop = np.concatenate([a + (b - a) * t for a, b in zip(corners, corners[1:] + corners[:1])])
    pts = grid.points[:, 0][:, None] + loop[None, :]
    values = section.values(pts.reshape(-1, 1)).reshape(pts.shape)
    phase = np.angle(np.concatenate([values, values[:, :1]], axis=1))
    turns = np.sum(np.angle(np.exp(1j * np.diff(phase, axis=1))), axis=1) / (2.0 * math.pi)
    return int(np.sum(np.round(turns)))


def zero_set(
    section: Section,
    resolution: float = 0.25,
    certificate: Optional[TransversalityCertificate] = None,
    region=None,
) -> ZeroSetSample:
    """Newton-polished zeros seeded from every cell whose centre could be within reach of a zero."""
    if certificate is not None and not certificate.certified:
        raise NotCertified(f"certificate status is {certificate.status}")
    domain = section.domain
    scale = section.scale
    if region is None and isinstance(domain, ModelChart) and not math.isfinite(domain.chart_radius):
        region = chart_grid(ModelChart(domain.n, section.k, domain.action, DEFAULT_CHART_RADIUS), resolution)
    grid = domain_grid(section, resolution, region)
    L0, _ = derivative_bounds(section, grid.points)
    h = grid.cover_radius
    values = section.values(grid.points)
    seeds = grid.points[np.abs(values) <= max(L0 * h, ZERO_TOL)]
    logger.info(f"Zero set: {len(seeds)} seeds of {len(grid.points)} samples (reach {L0 * h:.3f})")

    errors = []
    points = np.zeros((0, section.n), dtype=complex)
    if len(seeds):
        refined, ok = _newton(section, seeds, max_move=max(4.0 * h, 1.0))
        bad = int(np.sum(~ok))
        if bad:
            errors.append(NewtonDivergence(f"{bad} of {len(seeds)} seeds did not converge"))
            logger.warning(f"Newton: {bad} seeds diverged")
        points = refined[ok]
        if isinstance(domain, TorusQuotient):
            points = domain.reduce(points)
        else:
            reach = float(np.max(np.linalg.norm(complex_to_real(grid.points), axis=-1))) * scale
            points = points[np.linalg.norm(complex_to_real(points), axis=-1) * scale <= reach]
        labels = _labels(len(points), _pairs(points, MERGE_RADIUS, domain, scale))
        first = sorted({int(l): i for i, l in reversed(list(enumerate(labels)))}.values())
        points = points[first]
        order = np.lexsort(complex_to_real(points).T[::-1])
        points = points[order]

    del_n, delbar_n, sympl = zero_diagnostics(section, points)
    winding = None
    if section.n == 1 and isinstance(domain, TorusQuotient) and region is None:
        winding = winding_count(section, grid)
        if winding != len(points):
            logger.warning(f"Winding count {winding} differs from {len(points)} refined zeros")
    result = ZeroSetSample(points, domain, scale, resolution, del_n, delbar_n, sympl, None, len(seeds), errors, winding)
    logger.info(f"Zero set: {len(result)} zeros, {result.component_count()} components")
    return result


# checks on zero sets


@dataclass
class SymplecticReport:
    count: int
    min_margin: float
    min_tangent_singular: Optional[float]
    failures: int
    eta_failures: int = 0

    @property
    def ok(self) -> bool:
        return self.failures == 0 and self.eta_failures == 0

    def to_json(self) -> dict:
        return {
            "count": self.count,
            "min_margin": self.min_margin,
            "min_tangent_singular": self.min_tangent_singular,
            "failures": self.failures,
            "eta_failures": self.eta_failures,
            "ok": self.ok,
        }


def verify_symplectic(zeroset: ZeroSetSample, section: Section, eta: Optional[float] = None) -> SymplecticReport:
    """|del s| > |delbar s| at every zero, and omega non-degenerate on ker ds when n >= 2."""
    if len(zeroset) == 0:
        return SymplecticReport(0, math.inf, None, 0)
    del_n, delbar_n, sympl = zero_diagnostics(section, zeroset.points)
    margin = del_n - delbar_n
    failures = margin <= 0
    tangent = None
    if section.n >= 2:
        tangent = float(np.min(sympl))
        failures |= sympl <= SYMPLECTIC_TOL
    eta_failures = 0
    if eta is not None:
        grad = section.evaluate(zeroset.points).grad_norm
        eta_failures = int(np.sum(grad < eta * (1 - 1e-3)))
    report = SymplecticReport(len(zeroset), float(np.min(margin)), tangent, int(np.sum(failures)), eta_failures)
    logger.info(
        f"Symplectic check: {report.failures} failures over {report.count} zeros, "
        f"min(|del s| - |delbar s|)={report.min_margin:.3e}"
    )
    return report


def invariance_check(zeroset: ZeroSetSample, action: Optional[FiniteUnitaryAction] = None) -> float:
    """max over zeros z and g in G of the distance from g z to the nearest stored zero (g_k units)."""
    action = action or zeroset.domain.group
    if len(zeroset) == 0:
        return 0.0
    worst = 0.0
    for h in action.non_identity():
        moved = action.act(h, zeroset.points)
        dist = _nearest_distance(zeroset.points, moved, zeroset.domain, zeroset.scale)
        worst = max(worst, float(np.max(dist)))
    if worst > zeroset.resolution:
        logger.warning(f"Zero set is not G-invariant: orbit defect {worst:.3e}")
    return worst


def connectivity(zeroset: ZeroSetSample, radius: Optional[float] = None) -> int:
    """Connected components of the zero cloud, stable between linking radii r and 1.5 r."""
    if len(zeroset) == 0:
        return 0
    if zeroset.n < 2:
        logger.warning("Connectivity of a zero set of points only counts points")
    r = zeroset.linking_radius if radius is None else radius
    counts = []
    for rr in (r, 1.5 * r):
        labels = _labels(len(zeroset), _pairs(zeroset.points, rr, zeroset.domain, zeroset.scale))
        counts.append(int(len(np.unique(labels))))
    if counts[0] != counts[1]:
        raise ResolutionTooCoarse(f"components change from {counts[0]} to {counts[1]} between r={r} and 1.5r")
    return counts[0]


# Morse theory of log|s|^2


@dataclass
class CriticalPoint:
    point: np.ndarray
    value: float
    gradient_norm: float
    hessian: np.ndarray
    eigenvalues: np.ndarray
    index: int
    degenerate: bool

    def to_json(self) -> dict:
        return {
            "point": [[float(c.real), float(c.imag)] for c in self.point],
            "value": self.value,
            "gradient_norm": self.gradient_norm,
            "eigenvalues": [float(v) for v in self.eigenvalues],
            "index": self.index,
            "degenerate": self.degenerate,
        }


@dataclass
class MorseReport:
    critical_points: list
    tube_radius: float
    n: int
    seeds: int = 0
    errors: list = field(default_factory=list)

    @property
    def indices(self) -> list[int]:
        return [c.index for c in self.critical_points if not c.degenerate]

    @property
    def index_bound_ok(self) -> bool:
        return all(i >= self.n for i in self.indices)

    def to_json(self) -> dict:
        return {
            "tube_radius": self.tube_radius,
            "n": self.n,
            "seeds": self.seeds,
            "count": len(self.critical_points),
            "min_index": min(self.indices) if self.indices else None,
            "index_bound_ok": self.index_bound_ok,
            "critical_points": [c.to_json() for c in self.critical_points],
            "errors": _error_json(self.errors),
        }


def _default_seeds(section: Section, spacing: float = 1.0) -> np.ndarray:
    domain = section.domain
    if isinstance(domain, TorusQuotient):
        return domain_grid(section, spacing).points
    radius = domain.chart_radius if math.isfinite(domain.chart_radius) else DEFAULT_CHART_RADIUS
    return chart_grid(ModelChart(domain.n, section.k, domain.action, radius), spacing).points


def morse_analysis(
    section: Section,
    tube_radius: Optional[float] = None,
    seeds: Optional[np.ndarray] = None,
    eta: Optional[float] = None,
    zeroset: Optional[ZeroSetSample] = None,
    seed_spacing: float = 1.0,
) -> MorseReport:
    """Critical points of f = log|s|^2 outside the tube of g_k radius c around the zero set.

    By default c = eta / (2 C+) with C+ the measured bound on |grad s|, so that c C+ < eta.
    """
    seeds = _default_seeds(section, seed_spacing) if seeds is None else np.atleast_2d(seeds)
    n = section.n
    scale = section.scale
    L0, _ = derivative_bounds(section, seeds)
    if tube_radius is None:
        if eta is None:
            eta = measure_eta(section, seeds).eta_star
        tube_radius = 0.5 * eta / L0 if L0 > 0 else 0.0

    def outside(z: np.ndarray) -> np.ndarray:
        if zeroset is not None:
            return _nearest_distance(zeroset.points, z, zeroset.domain, zeroset.scale) >= tube_radius
        return np.abs(section.values(z)) >= L0 * tube_radius

    seeds = seeds[outside(seeds)] if len(seeds) else seeds
    errors = []
    found = []

    def grad(x):
        z = real_to_complex(x[None, :]) / scale
        return log_norm_derivatives(section, z)[1][0]

    def hess(x):
        z = real_to_complex(x[None, :]) / scale
        return log_norm_derivatives(section, z)[2][0]

    for z0 in seeds:
        x0 = complex_to_real(z0[None, :])[0] * scale
        try:
            sol = root(grad, x0, jac=hess, method="hybr")
        except (ValueError, np.linalg.LinAlgError):
            continue
        if not np.all(np.isfinite(sol.x)):
            continue
        z = real_to_complex(sol.x[None, :]) / scale
        if isinstance(section.domain, TorusQuotient):
            z = section.domain.reduce(z)
        f, g, H = log_norm_derivatives(section, z)
        gnorm = float(np.linalg.norm(g[0]))
        if not np.isfinite(gnorm) or gnorm >= GRADIENT_TOL or not bool(outside(z)[0]):
            continue
        if found:
            known = np.array([c.point for c in found])
            if np.min(_nearest_distance(known, z, section.domain, scale)) < MERGE_RADIUS:
                continue
        H0 = 0.5 * (H[0] + H[0].T)
        eig = np.linalg.eigvalsh(H0)
        degenerate = bool(np.min(np.abs(eig)) < EIGEN_TOL)
        if degenerate:
            errors.append(DegenerateHessian(f"smallest |eigenvalue| {np.min(np.abs(eig)):.2e} at {z[0]}"))
        found.append(
            CriticalPoint(z[0], float(f[0]), gnorm, H0, eig, int(np.sum(eig < 0)), degenerate)
        )
    if not found:
        errors.append(NoCriticalPointFound(f"no critical point of log|s|^2 from {len(seeds)} seeds"))
        logger.warning(f"Morse analysis: no critical point found from {len(seeds)} seeds")
    found.sort(key=lambda c: tuple(complex_to_real(c.point[None, :])[0]))
    report = MorseReport(found, float(tube_radius), n, len(seeds), errors)
    logger.info(
        f"Morse analysis: {len(found)} critical points, indices {sorted(set(report.indices))}, "
        f"tube radius {tube_radius:.3e}"
    )
    return report


def hessian_agreement(section: Section, point: np.ndarray, step: float = 1e-4) -> float:
    """Relative difference between the analytic and finite-difference Hessians of log|s|^2."""
    analytic = log_norm_derivatives(section, np.atleast_2d(point))[2][0]
    numeric = finite_difference_hessian(section, point, step)
    return float(np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(analytic)), 1e-12))


# isolated orbifold points


def isolated_fixed_point_check(section: Section, poset: StrataPoset, tol: float = 1e-8) -> list[dict]:
    """|s| at every point stratum; an isolated orbifold point should not lie on the divisor."""
    rows = []
    for index, stratum in enumerate(poset.strata):
        if not stratum.is_point:
            continue
        pts = stratum.points
        values = np.abs(section.values(pts))
        for p, v in zip(pts, values):
            rows.append(
                {
                    "stratum": index,
                    "point": [[float(c.real), float(c.imag)] for c in p],
                    "norm": float(v),
                    "vanishes": bool(v < tol),
                }
            )
    flagged = sum(r["vanishes"] for r in rows)
    if flagged:
        logger.warning(f"{flagged} isolated orbifold points lie on the zero set")
    return rows
