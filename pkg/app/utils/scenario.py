import logging
from typing import Optional

import numpy as np

from app.config import ScenarioConfig
from app.geometry.bundle_sections import (
    Domain,
    ModelChart,
    SectionExpansion,
    equivariant_average,
    peak_section,
)
from app.geometry.lattice import SeparatedLattice, build_domain_lattices
from app.geometry.strata import StrataPoset, build_strata
from app.geometry.transversality import PerturbationSchedule, chart_grid, plan_perturbation
from app.presets import build_domain, section_mode

logger = logging.getLogger(__name__)


def scenario_domain(config: ScenarioConfig) -> tuple[Domain, StrataPoset]:
    domain = build_domain(config)
    return domain, build_strata(domain)


def scenario_plan(
    config: ScenarioConfig, domain: Domain, poset: StrataPoset
) -> tuple[PerturbationSchedule, list[Optional[SeparatedLattice]]]:
    params = config.schedule
    return plan_perturbation(
        domain,
        poset,
        config.k,
        config.chart_radius,
        p=params.p,
        eta0=params.eta0,
        R_defaults=params.R,
        D_start=config.lattice.D,
        D_max=params.D_max,
    )


def scenario_lattices(
    config: ScenarioConfig,
    domain: Domain,
    poset: StrataPoset,
) -> list[Optional[SeparatedLattice]]:
    """Lattices with the config's shared (R, D)."""
    return build_domain_lattices(domain, poset, config.lattice.R, config.lattice.D, config.k, config.chart_radius)


def top_index(poset: StrataPoset) -> int:
    return next(i for i, s in enumerate(poset.strata) if s.is_top)


def empty_section(config: ScenarioConfig, domain: Domain) -> SectionExpansion:
    return SectionExpansion(domain, config.k, section_mode(config, domain))


def initial_section(
    config: ScenarioConfig,
    domain: Domain,
    poset: StrataPoset,
    lattices: list[Optional[SeparatedLattice]],
) -> SectionExpansion:
    """The zero section, or unit-modulus seeded phases on averaged peaks over the top lattice."""
    section = empty_section(config, domain)
    if config.initial == "zero":
        return section
    lattice = lattices[top_index(poset)]
    if lattice is None or len(lattice) == 0:
        logger.warning("Top stratum has no lattice; starting from the zero section")
        return section
    rng = np.random.default_rng(config.seed)
    phases = np.exp(2j * np.pi * rng.random(len(lattice)))
    terms = []
    for center, phase in zip(lattice.z_points, phases):
        peak = peak_section(domain, center, config.k, section.mode)
        terms.extend(equivariant_average(peak, domain.group, phase).terms)
    logger.info(f"Initial section: {len(lattice)} averaged peaks with seeded phases (seed={config.seed})")
    return section.with_terms(terms)


def section_payload(section: SectionExpansion) -> dict:
    data = section.to_json()
    data["domain"] = "chart" if isinstance(section.domain, ModelChart) else "torus"
    return data


def section_from_payload(data: dict, domain: Domain) -> SectionExpansion:
    return SectionExpansion.from_json(data, domain)


def chart_region(config: ScenarioConfig, domain: Domain, spacing: float, radius_gk: Optional[float] = None):
    """Sample grid on the configured chart ball; None on a torus, where the whole quotient is used."""
    if not isinstance(domain, ModelChart):
        return None
    scale = float(np.sqrt(2.0 * np.pi * config.k))
    radius = radius_gk if radius_gk is not None else config.chart_radius * scale
    return chart_grid(ModelChart(domain.n, config.k, domain.action, radius), spacing)
