"""Quantitative transversality: measurement, certification, local value search and the
stratified perturbation loop that turns an equivariant section into an eta-transverse one.
"""

import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from app.errors import EmptyRegion, NoAdmissibleValue, ScheduleInfeasible, TransversalityNotAchieved
from app.geometry.bundle_sections import (
    ExpansionTerm,
    ModelChart,
    Section,
    SectionExpansion,
    TorusQuotient,
    equivariant_average,
    peak_section,
    pullback_check,
)
from app.geometry.group_rep import complex_to_real, real_to_complex
from app.geometry.lattice import Region, SeparatedLattice, TorusRegion, stratum_lattice_for
from app.geometry.strata import StrataPoset

logger = logging.getLogger(__name__)

MAX_SPACING = 0.25
CANDIDATE_SIDE = 121
THRESHOLD_STEPS = 8
DIVISION_FLOOR = 1e-14
ADMISSIBLE_FRACTION = 0.9
LOCAL_RADIUS_FACTOR = 1.1


# sample grids


@dataclass(frozen=True)
class SampleGrid:
    """Sample points (z coordinates) whose centred cells `cell` (g_k units) tile the region."""

    points: np.ndarray
    cell: np.ndarray
    scale: float

    @property
    def n(self) -> int:
        return self.points.shape[1]

    @property
    def spacing(self) -> float:
        return float(np.max(np.linalg.norm(self.cell, axis=0)))

    @property
    def cover_radius(self) -> float:
        """Largest g_k distance from a cell centre to a point of its cell."""
        signs = np.array(list(itertools.product((-0.5, 0.5), repeat=self.cell.shape[0])))
        return float(np.max(np.linalg.norm(signs @ self.cell.T, axis=-1)))

    def refine(self, index: np.ndarray, factor: int = 3) -> "SampleGrid":
        """Replace the cells of `index` by factor^{2n} sub-cells."""
        half = (factor - 1) // 2
        ticks = np.arange(-half, half + 1) / factor
        offsets = np.array(list(itertools.product(ticks, repeat=self.cell.shape[0]))) @ self.cell.T
        shifts = real_to_complex(offsets) / self.scale
        pts = (self.points[index][:, None, :] + shifts[None, :, :]).reshape(-1, self.n)
        return SampleGrid(pts, self.cell / factor, self.scale)


def chart_grid(chart: ModelChart, spacing: float, radius_gk: Optional[float] = None) -> SampleGrid:
    """Cube grid covering the g_k ball of the chart (or of `radius_gk`)."""
    radius = chart.chart_radius if radius_gk is None else radius_gk
    if not math.isfinite(radius):
        raise EmptyRegion("an unbounded chart needs an explicit sampling radius")
    n = chart.n
    cell = spacing * np.eye(2 * n)
    reach = radius + spacing * math.sqrt(2 * n) / 2.0
    ticks = np.arange(-math.floor(reach / spacing), math.floor(reach / spacing) + 1) * spacing
    mesh = np.stack(np.meshgrid(*([ticks] * (2 * n)), indexing="ij"), axis=-1).reshape(-1, 2 * n)
    mesh = mesh[np.linalg.norm(mesh, axis=-1) <= reach + 1e-12]
    return SampleGrid(real_to_complex(mesh) / chart.scale, cell, chart.scale)


def torus_grid(quotient: TorusQuotient, k: int, spacing: float) -> SampleGrid:
    """Lattice-aligned grid whose parallelotope cells tile the fundamental domain."""
    scale = math.sqrt(k * quotient.omega_scale)
    longest = float(np.max(np.linalg.norm(quotient.period_basis, axis=0))) * scale
    count = max(1, int(math.ceil(longest / spacing)))
    idx = np.stack(
        np.meshgrid(*([np.arange(count)] * (2 * quotient.n)), indexing="ij"), axis=-1
    ).reshape(-1, 2 * quotient.n)
    pts = quotient.from_lattice_coords(idx / count)
    return SampleGrid(pts, quotient.period_basis * scale / count, scale)


def domain_grid(section: Section, spacing: float, region=None) -> SampleGrid:
    """Grid for a section's domain, a lattice Region, an explicit SampleGrid or raw z points."""
    domain = section.domain
    if isinstance(region, SampleGrid):
        return region
    if region is None:
        if isinstance(domain, TorusQuotient):
            return torus_grid(domain, section.k, spacing)
        return chart_grid(ModelChart(domain.n, section.k, domain.action, domain.chart_radius), spacing)
    if isinstance(region, TorusRegion):
        grid = torus_grid(region.quotient, section.k, spacing)
        keep = region.contains(grid.points * section.scale)
        return SampleGrid(grid.points[keep], grid.cell, grid.scale)
    if isinstance(region, Region):
        pts = region.sample_grid(spacing) / section.scale
        return SampleGrid(pts, spacing * np.eye(2 * section.n), section.scale)
    pts = np.atleast_2d(np.asarray(region, dtype=complex))
    return SampleGrid(pts, spacing * np.eye(2 * section.n), section.scale)


# measurement and certification


@dataclass
class EtaMeasurement:
    eta_star: float
    witness: np.ndarray
    samples: int

    def to_json(self) -> dict:
        return {
            "eta_star": self.eta_star,
            "witness": [[float(c.real), float(c.imag)] for c in self.witness],
            "samples": self.samples,
        }


def transversality_margin(section: Section, points: np.ndarray) -> np.ndarray:
    """max(|s|, |grad s|) pointwise, in g_k norms."""
    field = section.evaluate(points)
    return np.maximum(field.norm, field.grad_norm)


def measure_eta(section: Section, region=None, grid_spacing: float = MAX_SPACING) -> EtaMeasurement:
    """eta_star = min over samples of max(|s|, |grad s|) together with the sample attaining it."""
    if grid_spacing > MAX_SPACING:
        logger.warning(f"Grid spacing {grid_spacing} is coarser than {MAX_SPACING} g_k units")
    grid = domain_grid(section, grid_spacing, region)
    if len(grid.points) == 0:
        raise EmptyRegion("no samples in the region")
    margin = transversality_margin(section, grid.points)
    best = int(np.argmin(margin))
    return EtaMeasurement(float(margin[best]), grid.points[best], len(grid.points))


@dataclass
class TransversalityCertificate:
    eta: float
    grid_spacing: float
    lipschitz_s: float
    lipschitz_grad: float
    region: dict
    status: str
    witness: Optional[np.ndarray] = None
    samples: int = 0
    refinements: int = 0

    @property
    def certified(self) -> bool:
        return self.status == "certified"

    def to_json(self) -> dict:
        data = {
            "eta": self.eta,
            "grid_spacing": self.grid_spacing,
            "lipschitz_s": self.lipschitz_s,
            "lipschitz_grad": self.lipschitz_grad,
            "region": self.region,
            "status": self.status,
            "samples": self.samples,
            "refinements": self.refinements,
        }
        if self.witness is not None:
            data["witness"] = [[float(c.real), float(c.imag)] for c in self.witness]
        return data


def derivative_bounds(section: Section, points: np.ndarray, safety: float = 1.25) -> tuple[float, float]:
    """(L0, L1) bounding sup|grad s| and sup|grad^2 s| on the samples, inflated by `safety`."""
    if len(points) == 0:
        return 0.0, 0.0
    field = section.evaluate(points)
    second = section.second_order(points)
    return safety * float(np.max(field.grad_norm)), safety * float(np.max(second.hessian_norm))


def _region_summary(section: Section, grid: SampleGrid) -> dict:
    domain = section.domain
    summary = {"kind": "chart", "n": section.n, "k": section.k, "samples": int(len(grid.points))}
    if isinstance(domain, TorusQuotient):
        summary["kind"] = "torus"
    elif len(grid.points):
        summary["radius"] = float(np.max(np.linalg.norm(complex_to_real(grid.points), axis=-1)) * section.scale)
    return summary


def certify_eta(
    section: Section,
    region=None,
    eta: float = 0.0,
    grid_spacing: float = MAX_SPACING,
    L0: Optional[float] = None,
    L1: Optional[float] = None,
    max_refine: int = 0,
) -> TransversalityCertificate:
    """Lipschitz extension of the sampled check: every sample needs |s| >= eta + L0 h or
    |grad s| >= eta + L1 h with h the cell covering radius.

    Samples where both margins fail but the pointwise condition holds are refined up to
    `max_refine` times before the certificate is declared inconclusive.
    """
    grid = domain_grid(section, grid_spacing, region)
    summary = _region_summary(section, grid)
    if L0 is None or L1 is None:
        b0, b1 = derivative_bounds(section, grid.points)
        L0 = b0 if L0 is None else L0
        L1 = b1 if L1 is None else L1
    total = 0
    level = 0
    while True:
        total += len(grid.points)
        field = section.evaluate(grid.points)
        h = grid.cover_radius
        ok = (field.norm >= eta + L0 * h) | (field.grad_norm >= eta + L1 * h)
        pointwise_bad = (field.norm < eta) & (field.grad_norm <= eta)
        if np.any(pointwise_bad):
            worst = int(np.argmax(pointwise_bad))
            logger.info(f"Certificate failed at eta={eta:.3e}: witness {grid.points[worst]}")
            return TransversalityCertificate(
                eta, grid_spacing, L0, L1, summary, "failed", grid.points[worst], total, level
            )
        if np.all(ok):
            logger.info(f"Certified eta={eta:.3e} on {total} samples after {level} refinements")
            return TransversalityCertificate(eta, grid_spacing, L0, L1, summary, "certified", None, total, level)
        if level >= max_refine:
            first = int(np.argmin(ok))
            logger.info(f"Certificate inconclusive at eta={eta:.3e} after {level} refinements")
            return TransversalityCertificate(
                eta, grid_spacing, L0, L1, summary, "inconclusive", grid.points[first], total, level
            )
        grid = grid.refine(np.nonzero(~ok)[0])
        level += 1


# local transverse value


@dataclass(frozen=True)
class LocalSamples:
    """A complex function f on a polydisk: values and |df| (g_k norm) at sample points."""

    values: np.ndarray
    gradient_norms: np.ndarray
    points: Optional[np.ndarray] = None


@dataclass
class LocalChoice:
    w: complex
    achieved_sigma: float
    verified_sigma: float
    threshold: float

    def to_json(self) -> dict:
        return {
            "w": [self.w.real, self.w.imag],
            "achieved_sigma": self.achieved_sigma,
            "verified_sigma": self.verified_sigma,
            "threshold": self.threshold,
        }


def candidate_values(delta: float, side: int = CANDIDATE_SIDE) -> np.ndarray:
    """Square grid of the closed delta-disk, ordered origin first then lexicographically."""
    ticks = np.linspace(-delta, delta, side)
    re, im = np.meshgrid(ticks, ticks, indexing="ij")
    cands = (re + 1j * im).ravel()
    cands = cands[np.abs(cands) <= delta * (1 + 1e-12)]
    order = np.lexsort((np.round(cands.imag, 12), np.round(cands.real, 12), np.round(np.abs(cands), 12)))
    return cands[order]


def sampled_transversality(samples: LocalSamples, w: complex) -> float:
    """Largest sigma with f - w sigma-transverse to 0 on the samples."""
    if len(samples.values) == 0:
        return math.inf
    return float(np.min(np.maximum(np.abs(samples.values - w), samples.gradient_norms)))


def local_transverse_value(samples: LocalSamples, sigma: float, delta: float) -> LocalChoice:
    """Pick w with |w| <= delta as far as possible from the near-critical values of f.

    Thresholds s0 descend from max(sigma, delta); at each one the near-critical set
    V = {f(x) : |df(x)| < s0} is indexed and every candidate scores min(dist(w, V), s0).
    The first candidate with the best score wins.
    """
    if delta > 0.5:
        logger.warning(f"Search radius delta={delta} exceeds 1/2")
    cands = candidate_values(delta) if delta > 0 else np.zeros(1, dtype=complex)
    real_cands = np.stack([cands.real, cands.imag], axis=1)
    top = max(sigma, delta)
    if top <= 0.0:
        # schedule values below float range leave nothing to perturb
        return LocalChoice(0j, 0.0, sampled_transversality(samples, 0j), 0.0)
    best_w, best_score, best_threshold = cands[0], -1.0, top
    for step in range(THRESHOLD_STEPS):
        s0 = top / 2.0**step
        near = samples.gradient_norms < s0
        if not np.any(near):
            score = np.full(len(cands), s0)
        else:
            crit = samples.values[near]
            tree = cKDTree(np.stack([crit.real, crit.imag], axis=1))
            dist, _ = tree.query(real_cands)
            score = np.minimum(dist, s0)
        pick = int(np.argmax(score >= score.max() - 1e-15))
        if score[pick] > best_score + 1e-15:
            best_w, best_score, best_threshold = cands[pick], float(score[pick]), s0
        if best_score >= s0:
            break
    if best_score <= 0.0:
        raise NoAdmissibleValue(f"every candidate value within {delta} is a near-critical value")
    verified = sampled_transversality(samples, best_w)
    return LocalChoice(complex(best_w), best_score, verified, best_threshold)


# schedule


def q_p(eta: float, p: int) -> float:
    """Q_p(eta) = (log 1/eta)^{-p}."""
    return math.log(1.0 / eta) ** (-p)


def admissible_eta0(R: float, p: int) -> float:
    """eta0 must stay below exp(-(2R)^{1/p}) for the recursion to decrease."""
    return math.exp(-((2.0 * R) ** (1.0 / p)))


def eta_recursion(log_inv_eta0: float, steps: int, p: int, R: float) -> list[float]:
    """log(1/eta_i) for i = 0..steps with eta_i = Q_p(eta_{i-1}) eta_{i-1} / (2R)."""
    logs = [log_inv_eta0]
    for _ in range(steps):
        L = logs[-1]
        logs.append(L + p * math.log(L) + math.log(2.0 * R))
    return logs


@dataclass
class StratumSchedule:
    index: int
    height: int
    R: float
    D: float
    C: float
    m: int
    steps: int
    log_inv_eta: list

    @property
    def eta_sequence(self) -> list[float]:
        return [math.exp(-L) for L in self.log_inv_eta]

    def eta(self, i: int) -> float:
        return math.exp(-self.log_inv_eta[min(i, len(self.log_inv_eta) - 1)])

    def delta(self, i: int) -> float:
        """Perturbation bound of step i >= 1: half of eta_{i-1}, at most 1/2."""
        return min(0.5, 0.5 * self.eta(i - 1))

    @property
    def last_log_inv_eta(self) -> float:
        return self.log_inv_eta[-1]

    def to_json(self) -> dict:
        return {
            "stratum": self.index,
            "height": self.height,
            "R": self.R,
            "D": self.D,
            "C": self.C,
            "m": self.m,
            "steps": self.steps,
            "log10_eta": [-L / math.log(10.0) for L in self.log_inv_eta],
            "delta": [self.delta(i) for i in range(1, self.steps + 1)],
        }


@dataclass
class PerturbationSchedule:
    p: int
    strata: dict
    processing_order: list

    def for_stratum(self, index: int) -> StratumSchedule:
        return self.strata[index]

    @property
    def final_eta(self) -> float:
        return min(self.strata[i].eta(self.strata[i].steps) for i in self.processing_order)

    @property
    def total_budget(self) -> float:
        return sum(
            sum(s.delta(i) for i in range(1, s.steps + 1)) for s in self.strata.values()
        )

    def to_json(self) -> dict:
        return {
            "p": self.p,
            "processing_order": list(self.processing_order),
            "strata": [self.strata[i].to_json() for i in self.processing_order],
        }


def schedule_violations(schedule: PerturbationSchedule, poset: StrataPoset) -> list[str]:
    """Clauses of the size proposition that the schedule breaks (empty when it is sound)."""
    p = schedule.p
    broken = []
    for i, s in schedule.strata.items():
        logs = s.log_inv_eta
        if logs[0] <= (2.0 * s.R) ** (1.0 / p):
            broken.append(f"admissibility:{i}")
        expected = eta_recursion(logs[0], s.steps, p, s.R)
        if not np.allclose(expected, logs, rtol=1e-12) or any(b <= a for a, b in zip(logs, logs[1:])):
            broken.append(f"recursion:{i}")
        if p * math.log(logs[-1]) >= s.D**2:
            broken.append(f"final_size:{i}")
        for j in poset.above(i):
            upper = schedule.strata[j]
            if not s.R > 2.0 * upper.C * upper.D:
                broken.append(f"separation_radius:{i}<{j}")
            # eta_{i,1} < eta_{j,last} / 2 in log form
            if not logs[min(1, len(logs) - 1)] > upper.last_log_inv_eta + math.log(2.0):
                broken.append(f"nesting:{i}<{j}")
    return broken


def _family_count(C: float, D: float, m: int) -> int:
    return max(1, int(math.ceil(C * D**m)))


def compute_schedule(
    poset: StrataPoset,
    p: int = 3,
    eta0: float = 0.5,
    R_defaults: float = 1.0,
    D_start: float = 5.0,
    D_max: float = 400.0,
    C: Optional[dict] = None,
    m: Optional[dict] = None,
    steps: Optional[dict] = None,
    family_count: Optional[Callable[[int, float, float], int]] = None,
) -> PerturbationSchedule:
    """Per-stratum (R, D, eta sequence) by induction on the height, top stratum first.

    C, m and steps optionally override the family-count bookkeeping per stratum index;
    by default a stratum of complex dimension d runs C D^{2d} steps with C = 1.
    family_count(index, R, D), when given, is the number of families of the lattice
    actually built at (R, D), and the search for D runs on it.
    """
    if p < 1:
        raise ScheduleInfeasible(f"p must be a positive integer, got {p}", "admissibility")
    C = C or {}
    m = m or {}
    steps = steps or {}
    order = sorted(range(len(poset.strata)), key=lambda i: (poset.strata[i].height, i))
    result: dict[int, StratumSchedule] = {}
    for i in order:
        stratum = poset.strata[i]
        higher = [j for j in poset.above(i) if j in result]
        c_i = float(C.get(i, 1.0))
        m_i = int(m.get(i, 2 * stratum.fixed_subspace.rank))
        if not higher:
            R = R_defaults
            bound = admissible_eta0(R, p)
            start = min(eta0, ADMISSIBLE_FRACTION * bound)
            if start < eta0:
                logger.info(f"eta0={eta0} clipped to {start:.4f} (admissibility bound {bound:.4f})")
            log0 = math.log(1.0 / start)
        else:
            R = 2.0 * max(result[j].C * result[j].D for j in higher) + R_defaults
            # eta_{i,0} = min_j eta_{j,last} / 2 keeps eta_{i,1} below it
            log0 = max(result[j].last_log_inv_eta for j in higher) + math.log(2.0)
            if log0 <= (2.0 * R) ** (1.0 / p):
                raise ScheduleInfeasible(
                    f"stratum {i}: inherited eta is not admissible for R={R:.2f}", "admissibility"
                )
        D = float(D_start)
        while True:
            if i in steps:
                count = int(steps[i])
            elif family_count is not None:
                count = max(1, int(family_count(i, R, D)))
            else:
                count = _family_count(c_i, D, m_i) if m_i > 0 else 1
            logs = eta_recursion(log0, count, p, R)
            if p * math.log(logs[-1]) < D**2:
                break
            D += 1.0
            if D > D_max:
                raise ScheduleInfeasible(
                    f"stratum {i}: no D <= {D_max} satisfies Q_p(eta_last) > exp(-D^2)", "final_size"
                )
        result[i] = StratumSchedule(i, stratum.height, R, D, c_i, m_i, count, logs)
        logger.info(
            f"Schedule stratum {i} (height {stratum.height}): R={R:.2f} D={D:.0f} steps={count} "
            f"log10 eta_last={-logs[-1] / math.log(10.0):.2f}"
        )
    schedule = PerturbationSchedule(p, result, order)
    broken = schedule_violations(schedule, poset)
    if broken:
        raise ScheduleInfeasible(f"schedule violates {', '.join(broken)}", broken[0].split(":")[0])
    return schedule


def lattice_family_count(lattice: Optional[SeparatedLattice]) -> int:
    if lattice is None or len(lattice) == 0:
        return 0
    return int(len(np.unique(lattice.families)))


def plan_perturbation(
    domain,
    poset: StrataPoset,
    k: int,
    chart_radius: float = 1.0,
    p: int = 3,
    eta0: float = 0.5,
    R_defaults: float = 1.0,
    D_start: float = 5.0,
    D_max: float = 400.0,
) -> tuple[PerturbationSchedule, list[Optional[SeparatedLattice]]]:
    """Schedule and lattices built together: every stratum's step count is its lattice's family count."""
    built: dict[tuple[int, float, float], Optional[SeparatedLattice]] = {}

    def lattice_at(index: int, R: float, D: float) -> Optional[SeparatedLattice]:
        key = (index, float(R), float(D))
        if key not in built:
            built[key] = stratum_lattice_for(domain, poset, index, R, D, k, chart_radius)
        return built[key]

    schedule = compute_schedule(
        poset,
        p=p,
        eta0=eta0,
        R_defaults=R_defaults,
        D_start=D_start,
        D_max=D_max,
        family_count=lambda i, R, D: lattice_family_count(lattice_at(i, R, D)),
    )
    lattices = []
    for i in range(len(poset.strata)):
        plan = schedule.for_stratum(i)
        lattices.append(lattice_at(i, plan.R, plan.D))
    return schedule, lattices


@dataclass
class SweepRow:
    D: float
    steps: int
    min_q: float
    scaled: float

    def to_json(self) -> dict:
        return {"D": self.D, "steps": self.steps, "min_q": self.min_q, "scaled": self.scaled}


def xalpha_sweep(
    p: int = 3,
    D_values: Sequence[float] = (5.0, 10.0, 20.0),
    C0: float = 1.0,
    m: int = 2,
    eta0: float = 0.5,
    R: float = 1.0,
) -> dict:
    """min over alpha <= C0 D^m of Q_p(eta_alpha) D^{mp+1}; the lemma bounds it below uniformly in D."""
    start = min(eta0, ADMISSIBLE_FRACTION * admissible_eta0(R, p))
    rows = []
    for D in D_values:
        count = _family_count(C0, D, m)
        logs = eta_recursion(math.log(1.0 / start), count, p, R)
        # Q_p is smallest at the last (smallest) eta
        log_min_q = -p * math.log(logs[-1])
        rows.append(
            SweepRow(float(D), count, math.exp(log_min_q), math.exp(log_min_q + (m * p + 1) * math.log(D)))
        )
    constant = min(r.scaled for r in rows) if rows else 0.0
    logger.info(f"Sweep p={p} m={m}: lower constant {constant:.3e}")
    return {"rows": [r.to_json() for r in rows], "constant": constant}


# globalization


@dataclass
class StepRecord:
    stratum: int
    family: int
    point: int
    center: tuple
    w: complex
    achieved_sigma: float
    verified_sigma: float
    delta: float
    budget_used: float
    budget_total: float

    def csv_row(self) -> dict:
        row = {
            "stratum": self.stratum,
            "family": self.family,
            "point": self.point,
            "w_re": self.w.real,
            "w_im": self.w.imag,
            "achieved_sigma": self.achieved_sigma,
            "verified_sigma": self.verified_sigma,
            "delta": self.delta,
            "budget_used": self.budget_used,
            "budget_total": self.budget_total,
        }
        for j, c in enumerate(self.center):
            row[f"re_{j}"] = c.real
            row[f"im_{j}"] = c.imag
        return row


@dataclass
class GlobalizeResult:
    section: SectionExpansion
    certificate: TransversalityCertificate
    log: list = field(default_factory=list)
    family_log: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    equivariance_defect: float = 0.0

    def to_json(self) -> dict:
        return {
            "certificate": self.certificate.to_json(),
            "steps": len(self.log),
            "families": self.family_log,
            "skipped": self.skipped,
            "equivariance_defect": self.equivariance_defect,
            "budget_used": self.log[-1].budget_used if self.log else 0.0,
        }


def local_spacing(n: int, R: float, override: Optional[float] = None) -> float:
    """R/50 on curves; a coarser default on surfaces, where R/50 would cost ~1e8 samples per ball."""
    if override is not None:
        return override
    return R / 50.0 if n == 1 else R / 5.0


def local_samples(section: Section, center: np.ndarray, R: float, spacing: float) -> LocalSamples:
    """f = s / s_{k,p} and |df| on the g_k ball of radius 11R/10 around the lattice point."""
    n = section.n
    scale = section.scale
    radius = LOCAL_RADIUS_FACTOR * R
    ticks = np.arange(-radius, radius + 1e-12, spacing)
    mesh = np.stack(np.meshgrid(*([ticks] * (2 * n)), indexing="ij"), axis=-1).reshape(-1, 2 * n)
    mesh = mesh[np.linalg.norm(mesh, axis=-1) <= radius + 1e-12]
    pts = center[None, :] + real_to_complex(mesh) / scale
    mode = "periodized" if isinstance(section.domain, TorusQuotient) else "gaussian"
    peak = SectionExpansion(
        section.domain, section.k, mode, (ExpansionTerm(tuple(complex(c) for c in center), 1.0),)
    )
    s = section.jet(pts, order=1)
    sp = peak.jet(pts, order=1)
    denom = np.where(np.abs(sp.value) < DIVISION_FLOOR, DIVISION_FLOOR, sp.value)
    f = s.value / denom
    df = (s.d * sp.value[:, None] - s.value[:, None] * sp.d) / denom[:, None] ** 2
    dbf = (s.db * sp.value[:, None] - s.value[:, None] * sp.db) / denom[:, None] ** 2
    grad = np.sqrt(np.sum(np.abs(df) ** 2, axis=-1) + np.sum(np.abs(dbf) ** 2, axis=-1))
    return LocalSamples(f, grad, pts)


def _ball_points(center: np.ndarray, radius: float, spacing: float, scale: float) -> np.ndarray:
    n = len(center)
    ticks = np.arange(-radius, radius + 1e-12, spacing)
    mesh = np.stack(np.meshgrid(*([ticks] * (2 * n)), indexing="ij"), axis=-1).reshape(-1, 2 * n)
    mesh = mesh[np.linalg.norm(mesh, axis=-1) <= radius + 1e-12]
    return center[None, :] + real_to_complex(mesh) / scale


def _certify_region(section: SectionExpansion, lattices: Sequence[Optional[SeparatedLattice]]):
    """Whole torus, or the chart ball one covering radius inside the largest lattice region."""
    if isinstance(section.domain, TorusQuotient):
        return None
    radii = [getattr(lat.region, "radius", 0.0) for lat in lattices if lat is not None]
    R = max((lat.params.R for lat in lattices if lat is not None), default=1.0)
    radius = max(radii, default=0.0) - R
    if radius <= 0:
        raise EmptyRegion("the chart lattices leave no interior to certify")
    chart = ModelChart(section.n, section.k, section.domain.group, radius)
    return chart_grid(chart, MAX_SPACING)


def globalize(
    initial: SectionExpansion,
    lattices: Sequence[Optional[SeparatedLattice]],
    schedule: PerturbationSchedule,
    poset: StrataPoset,
    local_sample_spacing: Optional[float] = None,
    certify_spacing: float = MAX_SPACING,
    max_refine: int = 6,
    jobs: int = 1,
    track_locality: bool = False,
    certify_region=None,
) -> GlobalizeResult:
    """Stratified perturbation s <- s - sum_p w_p avg(s_{k,p}), strata by increasing height,
    families in order, every point of a family searched independently.
    """
    domain = initial.domain
    group = domain.group
    section = initial.flattened()
    records: list[StepRecord] = []
    family_log: list[dict] = []
    skipped: list[dict] = []
    budget_used = 0.0
    budget_total = 0.0
    worst_defect = 0.0
    check_points = _equivariance_points(section)

    for index in schedule.processing_order:
        lattice = lattices[index] if index < len(lattices) else None
        plan = schedule.for_stratum(index)
        if lattice is None or len(lattice) == 0:
            logger.info(f"Stratum {index}: empty lattice, skipped")
            skipped.append({"stratum": index, "reason": "empty lattice"})
            continue
        families = sorted(int(f) for f in np.unique(lattice.families))
        if len(families) > plan.steps:
            raise ScheduleInfeasible(
                f"Stratum {index}: lattice has {len(families)} families but the schedule plans {plan.steps} steps",
                "family_count",
            )
        centers = lattice.z_points
        processed: list[int] = []
        for step, fam in enumerate(families, start=1):
            sigma = plan.eta(step)
            delta = plan.delta(step)
            budget_total += delta
            members = [int(i) for i in lattice.family_members(fam)]
            spacing = local_spacing(section.n, plan.R, local_sample_spacing)

            def search(i, current=section):
                samples = local_samples(current, centers[i], plan.R, spacing)
                return local_transverse_value(samples, sigma, delta)

            if jobs > 1 and len(members) > 1:
                with ThreadPoolExecutor(max_workers=jobs) as pool:
                    choices = list(pool.map(search, members))
            else:
                choices = [search(i) for i in members]

            new_terms = []
            step_max = 0.0
            for i, choice in zip(members, choices):
                step_max = max(step_max, abs(choice.w))
                if choice.w != 0:
                    mode = "periodized" if isinstance(domain, TorusQuotient) else section.mode
                    peak = peak_section(domain, centers[i], section.k, mode)
                    new_terms.extend(equivariant_average(peak, group, -choice.w).terms)
                record = StepRecord(
                    index,
                    fam,
                    i,
                    tuple(complex(c) for c in centers[i]),
                    choice.w,
                    choice.achieved_sigma,
                    choice.verified_sigma,
                    delta,
                    budget_used + step_max,
                    budget_total,
                )
                records.append(record)
                logger.debug(
                    f"Stratum {index} family {fam} point {i}: w={choice.w:.3e} "
                    f"sigma={choice.achieved_sigma:.3e}"
                )
            budget_used += step_max
            if new_terms:
                section = section.with_terms(new_terms)
            if len(check_points):
                worst_defect = max(worst_defect, pullback_check(section, group, check_points))
            processed.extend(members)
            entry = {"stratum": index, "family": fam, "points": len(members), "scheduled_eta": sigma}
            if track_locality:
                balls = np.concatenate(
                    [_ball_points(centers[i], LOCAL_RADIUS_FACTOR * plan.R, MAX_SPACING, section.scale) for i in processed]
                )
                entry["eta_on_processed"] = float(np.min(transversality_margin(section, balls)))
            family_log.append(entry)
        logger.info(f"Stratum {index}: {len(families)} families, {len(lattice)} points processed")

    region = certify_region if certify_region is not None else _certify_region(section, lattices)
    measured = measure_eta(section, region, certify_spacing)
    target = max(0.5 * measured.eta_star, schedule.final_eta)
    certificate = certify_eta(section, region, target, certify_spacing, max_refine=max_refine)
    if not certificate.certified and target > schedule.final_eta:
        certificate = certify_eta(section, region, schedule.final_eta, certify_spacing, max_refine=max_refine)
    result = GlobalizeResult(section, certificate, records, family_log, skipped, worst_defect)
    if not certificate.certified:
        error = TransversalityNotAchieved(
            f"certificate {certificate.status} at eta={certificate.eta:.3e}, witness {certificate.witness}"
        )
        error.result = result
        raise error
    logger.info(
        f"Globalized: {len(records)} steps, budget {budget_used:.3e}/{budget_total:.3e}, "
        f"certified eta={certificate.eta:.3e}, equivariance defect {worst_defect:.2e}"
    )
    return result


def _equivariance_points(section: SectionExpansion, count: int = 64, seed: int = 0) -> np.ndarray:
    domain = section.domain
    if domain.group.order == 1:
        return np.zeros((0, section.n), dtype=complex)
    rng = np.random.default_rng(seed)
    if isinstance(domain, TorusQuotient):
        return domain.from_lattice_coords(rng.random((count, 2 * section.n)))
    radius = 3.0 if not math.isfinite(domain.chart_radius) else domain.chart_radius
    pts = real_to_complex(rng.uniform(-radius, radius, (count, 2 * section.n)))
    return pts / section.scale


# restriction to strata


def restricted_margin(section: Section, points: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """max(|s|, |grad_T s|) with grad_T the covariant derivative along span(basis rows)."""
    field = section.evaluate(points)
    n = section.n
    d = field.grad[:, :n]
    db = field.grad[:, n:]
    if basis.shape[0] == 0:
        return field.norm
    along = d @ basis.T
    along_bar = db @ basis.conj().T
    grad_t = np.sqrt(np.sum(np.abs(along) ** 2, axis=-1) + np.sum(np.abs(along_bar) ** 2, axis=-1))
    return np.maximum(field.norm, grad_t)


def _stratum_samples(section: Section, poset: StrataPoset, index: int, spacing: float) -> np.ndarray:
    stratum = poset.strata[index]
    domain = section.domain
    scale = section.scale
    if stratum.is_point:
        return stratum.points
    if isinstance(domain, TorusQuotient):
        if stratum.is_top:
            return domain_grid(section, spacing).points
        samples = np.concatenate([c.samples for c in stratum.orbit])
        return domain.from_lattice_coords(samples)
    basis = stratum.fixed_subspace.basis
    radius = domain.chart_radius if math.isfinite(domain.chart_radius) else 3.0
    rank = basis.shape[0]
    ticks = np.arange(-radius, radius + 1e-12, spacing)
    mesh = np.stack(np.meshgrid(*([ticks] * (2 * rank)), indexing="ij"), axis=-1).reshape(-1, 2 * rank)
    mesh = mesh[np.linalg.norm(mesh, axis=-1) <= radius + 1e-12]
    return (real_to_complex(mesh) @ basis) / scale


def stratum_restricted_eta(
    section: Section,
    poset: StrataPoset,
    spacing: float = MAX_SPACING,
) -> list[dict]:
    """Per stratum: eta_star of the section restricted to the stratum (|s| on point strata)."""
    rows = []
    for index, stratum in enumerate(poset.strata):
        pts = _stratum_samples(section, poset, index, spacing)
        if len(pts) == 0:
            rows.append({"stratum": index, "eta_star": None, "samples": 0})
            continue
        margin = restricted_margin(section, pts, stratum.fixed_subspace.basis)
        worst = int(np.argmin(margin))
        rows.append(
            {
                "stratum": index,
                "height": stratum.height,
                "dimension": stratum.fixed_subspace.rank,
                "eta_star": float(margin[worst]),
                "witness": [[float(c.real), float(c.imag)] for c in pts[worst]],
                "samples": int(len(pts)),
            }
        )
        logger.debug(f"Stratum {index}: restricted eta_star={margin[worst]:.3e}")
    return rows
