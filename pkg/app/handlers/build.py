import logging
import time

from app.config import ScenarioConfig
from app.geometry.bundle_sections import pullback_check
from app.geometry.transversality import measure_eta
from app.handlers import Router
from app.storage.artifacts import save_json
from app.utils.scenario import (
    chart_region,
    initial_section,
    scenario_domain,
    scenario_lattices,
    section_payload,
)

logger = logging.getLogger(__name__)


def cmd_build(config: ScenarioConfig) -> dict:
    started = time.perf_counter()
    out = config.output_dir()
    domain, poset = scenario_domain(config)
    lattices = scenario_lattices(config, domain, poset)
    section = initial_section(config, domain, poset, lattices)

    samples = section.centers[:64]
    defect = pullback_check(section, domain.group, samples) if len(samples) else 0.0
    spacing = config.grids.certify_spacing
    measured = measure_eta(section, chart_region(config, domain, spacing), spacing) if section.terms else None
    data = section_payload(section)
    data["summary"] = {
        "terms": len(section.terms),
        "initial": config.initial,
        "seed": config.seed,
        "equivariance_defect": defect,
        "eta_star": measured.eta_star if measured else 0.0,
    }
    data["timings"] = {"build": time.perf_counter() - started}
    save_json(out, "section_initial.json", data)
    logger.info(f"Initial section: {len(section.terms)} terms, equivariance defect {defect:.2e}")
    return data


build_router = Router("build", cmd_build)
