import logging
import time

from app.config import ScenarioConfig
from app.errors import NotCertified, ResolutionTooCoarse
from app.geometry.divisor_analysis import (
    connectivity,
    hessian_agreement,
    invariance_check,
    isolated_fixed_point_check,
    morse_analysis,
    verify_symplectic,
    zero_set,
)
from app.geometry.transversality import stratum_restricted_eta
from app.handlers import Router
from app.storage.artifacts import load_json, save_csv, save_json
from app.utils.scenario import chart_region, scenario_domain, section_from_payload

logger = logging.getLogger(__name__)

HESSIAN_CHECKS = 5


def cmd_analyze(config: ScenarioConfig) -> dict:
    started = time.perf_counter()
    out = config.output_dir()
    certificate = load_json(out, "certificate.json")
    if certificate.get("status") != "certified":
        raise NotCertified(f"certificate.json has status {certificate.get('status')}")
    payload = load_json(out, "section_final.json")
    domain, poset = scenario_domain(config)
    section = section_from_payload(payload, domain)
    eta = float(certificate["eta"])
    grids = config.grids
    radius = certificate.get("region", {}).get("radius")

    zeros = zero_set(section, grids.zero_resolution, region=chart_region(config, domain, grids.zero_resolution, radius))
    save_csv(out, "zeros.csv", zeros.csv_rows())
    sampled = time.perf_counter()

    symplectic = verify_symplectic(zeros, section, eta)
    invariance = invariance_check(zeros, domain.group)
    try:
        components = connectivity(zeros)
        connectivity_note = None
    except ResolutionTooCoarse as e:
        logger.warning(f"Connectivity undecided: {e}")
        components, connectivity_note = None, str(e)

    seed_region = chart_region(config, domain, 1.0, radius)
    morse = morse_analysis(
        section,
        tube_radius=grids.tube_radius,
        seeds=seed_region.points if seed_region is not None else None,
        eta=eta,
        zeroset=zeros,
    )
    agreement = [
        hessian_agreement(section, c.point) for c in morse.critical_points if not c.degenerate
    ][:HESSIAN_CHECKS]

    data = {
        "artifact": "zeros.csv",
        "eta": eta,
        "zero_set": {
            **zeros.to_json(),
            "orbit_count": zeros.orbit_count(domain.group),
            "invariance_defect": invariance,
            "connected_components": components,
            "connectivity_note": connectivity_note,
        },
        "symplectic": symplectic.to_json(),
        "morse": {**morse.to_json(), "hessian_agreement": agreement},
        "isolated_points": isolated_fixed_point_check(section, poset),
        "restricted_eta": stratum_restricted_eta(section, poset, grids.certify_spacing),
        "timings": {"zero_set": sampled - started, "checks": time.perf_counter() - sampled},
    }
    save_json(out, "analysis.json", data)
    return data


analyze_router = Router("analyze", cmd_analyze)
